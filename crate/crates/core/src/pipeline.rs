//! Inference orchestration: seed sampling from the seed map, per-seed crop
//! prediction through the instance head, merging of redundant candidates,
//! and flattening into a label map. Includes the dihedral test-time
//! ensemble and a training-free analytic fixture for exercising the whole
//! path without a trained backbone.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dihedral::{Dihedral, Rect};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::labelmap::{boundary_distance, LabelMap};
use crate::model::{self, coordinate_grid, ArchitectureConfig, FeatureBundle, ModelParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Seed {
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceCandidate {
    pub seed: Seed,
    /// Crop window in image coordinates.
    pub window: Rect,
    /// Instance-head logits over the window, row major.
    pub logits: Vec<f64>,
    /// logits >= 0, cached.
    pub mask: Vec<bool>,
}

impl InstanceCandidate {
    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Mask value at image coordinates; false outside the window.
    pub fn mask_at(&self, y: usize, x: usize) -> bool {
        self.window.contains(y, x)
            && self.mask[(y - self.window.top) * self.window.width + (x - self.window.left)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed_threshold: f64,
    /// Non-max suppression window radius r; the window is (2r+1) squared.
    pub local_max_radius: usize,
    pub crop_size: usize,
    pub merge_iou: f64,
    pub tta: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed_threshold: 0.5,
            local_max_radius: 2,
            crop_size: 128,
            merge_iou: 0.5,
            tta: false,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(2) {
            return Err(Error::invalid("pipeline config", "crop_size must be even and positive"));
        }
        if !(0.0..1.0).contains(&self.seed_threshold) || self.seed_threshold == 0.0 {
            return Err(Error::invalid("pipeline config", "seed_threshold must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.merge_iou) || self.merge_iou == 0.0 {
            return Err(Error::invalid("pipeline config", "merge_iou must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Tracked allocation totals for candidate prediction, in bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AllocStats {
    /// Live at return: candidate logits and masks.
    pub retained_bytes: usize,
    /// High-water mark of retained plus per-seed transients.
    pub peak_bytes: usize,
}

/// Local maxima of the seed map at or above the threshold, descending by
/// score. A flat plateau of equal scores yields only its raster-first
/// pixel; plateaus are grouped with diagonal adjacency.
pub fn sample_seeds(s: &Tensor, cfg: &PipelineConfig) -> Result<Vec<Seed>> {
    cfg.validate()?;
    let shape = s.shape();
    if shape.len() != 2 {
        return Err(Error::invalid("sample_seeds", format!("seed map must be 2-d, got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    let d = s.data();
    let r = cfg.local_max_radius as isize;

    let mut cands: Vec<(usize, usize)> = Vec::new();
    let mut is_cand = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = d[y * w + x];
            if v < cfg.seed_threshold {
                continue;
            }
            let mut maximal = true;
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    if d[yy as usize * w + xx as usize] > v {
                        maximal = false;
                        break 'scan;
                    }
                }
            }
            if maximal {
                cands.push((y, x));
                is_cand[y * w + x] = true;
            }
        }
    }

    // keep one pixel per equal-valued connected plateau; scanning candidates
    // in raster order makes each flood-fill start the raster-first member
    let mut visited = vec![false; h * w];
    let mut seeds = Vec::new();
    for &(y, x) in &cands {
        if visited[y * w + x] {
            continue;
        }
        let v = d[y * w + x];
        let mut stack = vec![(y, x)];
        visited[y * w + x] = true;
        while let Some((cy, cx)) = stack.pop() {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (ny, nx) = (cy as isize + dy, cx as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let ni = ny as usize * w + nx as usize;
                    if is_cand[ni] && !visited[ni] && d[ni] == v {
                        visited[ni] = true;
                        stack.push((ny as usize, nx as usize));
                    }
                }
            }
        }
        seeds.push(Seed { row: y, col: x, score: v });
    }
    seeds.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then((a.row, a.col).cmp(&(b.row, b.col)))
    });
    Ok(seeds)
}

/// Crop window of side `crop` centered at the seed, clipped to the image.
pub(crate) fn seed_window(row: usize, col: usize, h: usize, w: usize, crop: usize) -> Rect {
    let half = (crop / 2) as isize;
    let t0 = row as isize - half;
    let l0 = col as isize - half;
    let top = t0.max(0) as usize;
    let left = l0.max(0) as usize;
    let bottom = ((t0 + crop as isize).min(h as isize)) as usize;
    let right = ((l0 + crop as isize).min(w as isize)) as usize;
    Rect { top, left, height: bottom - top, width: right - left }
}

/// Offsets (Q - Q_seed) and the embedding crop over one window of a bundle.
fn crop_offsets(
    b: &FeatureBundle,
    rect: Rect,
    srow: usize,
    scol: usize,
    d_p: usize,
    d_e: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (b.height(), b.width());
    let area = rect.area();
    let p = b.p.data();
    let o = b.o.data();
    let mut offsets = vec![0.0; d_p * area];
    for c in 0..d_p {
        let plane = c * h * w;
        let q_seed = p[plane + srow * w + scol] + o[plane + srow * w + scol];
        for y in 0..rect.height {
            for x in 0..rect.width {
                let src = plane + (rect.top + y) * w + rect.left + x;
                offsets[c * area + y * rect.width + x] = p[src] + o[src] - q_seed;
            }
        }
    }
    let e = b.e.data();
    let mut e_crop = vec![0.0; d_e * area];
    for c in 0..d_e {
        let plane = c * h * w;
        for y in 0..rect.height {
            let src = plane + (rect.top + y) * w + rect.left;
            let dst = c * area + y * rect.width;
            e_crop[dst..dst + rect.width].copy_from_slice(&e[src..src + rect.width]);
        }
    }
    (offsets, e_crop)
}

/// Instance-head logits over one crop; also reports the tape's transient
/// footprint for allocation accounting.
fn phi_logits(
    params: &ModelParams,
    offsets: Vec<f64>,
    e_crop: Vec<f64>,
    rh: usize,
    rw: usize,
) -> Result<(Vec<f64>, usize)> {
    let (d_p, d_e) = (params.config.d_p, params.config.d_e);
    let mut g = Graph::new();
    let ov = g.leaf(Tensor::new(vec![1, d_p, rh, rw], offsets)?, false);
    let ev = g.leaf(Tensor::new(vec![1, d_e, rh, rw], e_crop)?, false);
    let w1 = g.leaf(params.phi_fc1.weight.clone(), false);
    let b1 = g.leaf(params.phi_fc1.bias.clone(), false);
    let w2 = g.leaf(params.phi_fc2.weight.clone(), false);
    let b2 = g.leaf(params.phi_fc2.bias.clone(), false);
    let out = model::phi_graph(&mut g, ov, ev, (w1, b1), (w2, b2))?;
    let bytes = g.value_bytes();
    Ok((g.value(out).data().to_vec(), bytes))
}

fn candidate_from_logits(seed: Seed, window: Rect, logits: Vec<f64>) -> Option<InstanceCandidate> {
    let mask: Vec<bool> = logits.iter().map(|&v| v >= 0.0).collect();
    if mask.iter().any(|&m| m) {
        Some(InstanceCandidate { seed, window, logits, mask })
    } else {
        None
    }
}

fn check_bundle(bundle: &FeatureBundle, params: &ModelParams) -> Result<(usize, usize)> {
    let (h, w) = (bundle.height(), bundle.width());
    let (d_p, d_e) = (params.config.d_p, params.config.d_e);
    if bundle.p.shape() != [d_p, h, w] || bundle.o.shape() != [d_p, h, w] {
        return Err(Error::invalid(
            "predict_instances",
            format!("embedding planes {:?} do not match model d_p {d_p}", bundle.p.shape()),
        ));
    }
    if bundle.e.shape() != [d_e, h, w] {
        return Err(Error::invalid(
            "predict_instances",
            format!("conditional planes {:?} do not match model d_e {d_e}", bundle.e.shape()),
        ));
    }
    Ok((h, w))
}

/// One candidate per seed: crop the bundle around the seed, run the
/// instance head on the offsets, threshold at zero. Candidates whose mask
/// comes up empty are dropped. All allocations are crop-sized, so the
/// footprint scales with the seed count and never with the image area.
pub fn predict_instances(
    bundle: &FeatureBundle,
    seeds: &[Seed],
    params: &ModelParams,
    cfg: &PipelineConfig,
) -> Result<Vec<InstanceCandidate>> {
    predict_instances_accounted(bundle, seeds, params, cfg).map(|(c, _)| c)
}

pub fn predict_instances_accounted(
    bundle: &FeatureBundle,
    seeds: &[Seed],
    params: &ModelParams,
    cfg: &PipelineConfig,
) -> Result<(Vec<InstanceCandidate>, AllocStats)> {
    cfg.validate()?;
    let (h, w) = check_bundle(bundle, params)?;
    let (d_p, d_e) = (params.config.d_p, params.config.d_e);
    let mut stats = AllocStats::default();
    let mut out = Vec::new();
    for &seed in seeds {
        if seed.row >= h || seed.col >= w {
            return Err(Error::invalid(
                "predict_instances",
                format!("seed ({}, {}) outside {h}x{w}", seed.row, seed.col),
            ));
        }
        let rect = seed_window(seed.row, seed.col, h, w, cfg.crop_size);
        let (offsets, e_crop) = crop_offsets(bundle, rect, seed.row, seed.col, d_p, d_e);
        let (logits, tape_bytes) = phi_logits(params, offsets, e_crop, rect.height, rect.width)?;
        stats.peak_bytes = stats.peak_bytes.max(stats.retained_bytes + tape_bytes);
        if let Some(c) = candidate_from_logits(seed, rect, logits) {
            stats.retained_bytes += c.logits.len() * std::mem::size_of::<f64>() + c.mask.len();
            stats.peak_bytes = stats.peak_bytes.max(stats.retained_bytes);
            out.push(c);
        }
    }
    Ok((out, stats))
}

/// Exact features for a label map with convex, well-separated instances:
/// the seed map is the normalized boundary distance, embeddings snap every
/// instance pixel to its centroid, the conditional channel carries the
/// equivalent radius, and the instance head is hand-set to
/// radius - |offset|_1. Drives the full inference path without training.
pub fn analytic_bundle(
    labels: &LabelMap,
    d_p: usize,
    d_e: usize,
) -> Result<(FeatureBundle, ModelParams)> {
    if d_p < 2 {
        return Err(Error::invalid("analytic_bundle", "d_p must be at least 2"));
    }
    if d_e < 1 {
        return Err(Error::invalid("analytic_bundle", "the size channel needs d_e >= 1"));
    }
    let (h, w) = (labels.height(), labels.width());
    let s_map = boundary_distance(labels);

    let mut count: HashMap<u32, f64> = HashMap::new();
    let mut cy: HashMap<u32, f64> = HashMap::new();
    let mut cx: HashMap<u32, f64> = HashMap::new();
    for y in 0..h {
        for x in 0..w {
            let l = labels.get(y, x);
            if l > 0 {
                *count.entry(l).or_insert(0.0) += 1.0;
                *cy.entry(l).or_insert(0.0) += y as f64;
                *cx.entry(l).or_insert(0.0) += x as f64;
            }
        }
    }

    let mut p = vec![0.0; d_p * h * w];
    let mut e = vec![0.0; d_e * h * w];
    for y in 0..h {
        for x in 0..w {
            let l = labels.get(y, x);
            if l == 0 {
                continue;
            }
            let n = count[&l];
            p[y * w + x] = cy[&l] / n - y as f64;
            p[h * w + y * w + x] = cx[&l] / n - x as f64;
            e[y * w + x] = (n / std::f64::consts::PI).sqrt();
        }
    }

    let phi_hidden = 2 * d_p + 1;
    let config = ArchitectureConfig {
        widths: vec![4, 8],
        d_f: 4,
        d_p,
        d_e,
        phi_hidden,
        ..Default::default()
    };
    let mut params = ModelParams::build(config)?;
    let ins = d_p + d_e;
    let mut w1 = vec![0.0; phi_hidden * ins];
    for c in 0..d_p {
        w1[2 * c * ins + c] = 1.0;
        w1[(2 * c + 1) * ins + c] = -1.0;
    }
    w1[2 * d_p * ins + d_p] = 1.0;
    params.phi_fc1.weight = Tensor::new(vec![phi_hidden, ins, 1, 1], w1)?;
    params.phi_fc1.bias = Tensor::zeros(vec![phi_hidden]);
    let mut w2 = vec![-1.0; phi_hidden];
    w2[2 * d_p] = 1.0;
    params.phi_fc2.weight = Tensor::new(vec![1, phi_hidden, 1, 1], w2)?;
    params.phi_fc2.bias = Tensor::zeros(vec![1]);

    let bundle = FeatureBundle {
        s: Tensor::new(vec![h, w], s_map.data().to_vec())?,
        p: Tensor::new(vec![d_p, h, w], p)?,
        e: Tensor::new(vec![d_e, h, w], e)?,
        o: coordinate_grid(h, w, d_p),
    };
    Ok((bundle, params))
}

fn mask_iou(a: &InstanceCandidate, b: &InstanceCandidate) -> f64 {
    let fa = a.foreground_count();
    let fb = b.foreground_count();
    if fa + fb == 0 {
        return 0.0;
    }
    let mut inter = 0usize;
    if let Some(r) = a.window.intersect(&b.window) {
        for y in r.top..r.top + r.height {
            for x in r.left..r.left + r.width {
                if a.mask_at(y, x) && b.mask_at(y, x) {
                    inter += 1;
                }
            }
        }
    }
    inter as f64 / (fa + fb - inter) as f64
}

/// Union of two candidates: covering window, elementwise max of logits
/// (pixels outside either source window contribute negative infinity). The
/// higher-ranked seed is kept.
fn union_candidates(a: &InstanceCandidate, b: &InstanceCandidate) -> InstanceCandidate {
    let window = a.window.union(&b.window);
    let mut logits = vec![f64::NEG_INFINITY; window.area()];
    for src in [a, b] {
        for y in 0..src.window.height {
            for x in 0..src.window.width {
                let gy = src.window.top + y;
                let gx = src.window.left + x;
                let di = (gy - window.top) * window.width + (gx - window.left);
                logits[di] = logits[di].max(src.logits[y * src.window.width + x]);
            }
        }
    }
    let mask = logits.iter().map(|&v| v >= 0.0).collect();
    InstanceCandidate { seed: a.seed, window, logits, mask }
}

/// Greedy agglomeration of heavily overlapping candidates, highest seed
/// score first, until no pair reaches the merge threshold. Idempotent.
pub fn merge_redundant(
    mut cands: Vec<InstanceCandidate>,
    cfg: &PipelineConfig,
) -> Vec<InstanceCandidate> {
    cands.sort_by(|a, b| {
        b.seed
            .score
            .partial_cmp(&a.seed.score)
            .unwrap()
            .then((a.seed.row, a.seed.col).cmp(&(b.seed.row, b.seed.col)))
    });
    loop {
        let mut merged_any = false;
        let mut i = 0;
        while i < cands.len() {
            let mut j = i + 1;
            while j < cands.len() {
                if mask_iou(&cands[i], &cands[j]) >= cfg.merge_iou {
                    let other = cands.remove(j);
                    cands[i] = union_candidates(&cands[i], &other);
                    merged_any = true;
                } else {
                    j += 1;
                }
            }
            i += 1;
        }
        if !merged_any {
            return cands;
        }
    }
}

/// Per pixel: the candidate with the greatest logit wins if that logit is
/// at least zero, otherwise background. Equal logits go to the earlier
/// candidate. Output labels are sequential.
pub fn flatten(cands: &[InstanceCandidate], h: usize, w: usize) -> LabelMap {
    let mut best = vec![f64::NEG_INFINITY; h * w];
    let mut label = vec![0u32; h * w];
    for (idx, c) in cands.iter().enumerate() {
        for y in 0..c.window.height {
            for x in 0..c.window.width {
                let v = c.logits[y * c.window.width + x];
                if v < 0.0 {
                    continue;
                }
                let gy = c.window.top + y;
                let gx = c.window.left + x;
                if gy < h && gx < w {
                    let gi = gy * w + gx;
                    if v > best[gi] {
                        best[gi] = v;
                        label[gi] = idx as u32 + 1;
                    }
                }
            }
        }
    }
    LabelMap::from_raw(h, w, label).expect("sized").relabel_sequential()
}

/// Full single-pass inference over a prepared feature bundle.
pub fn infer_with(
    bundle: &FeatureBundle,
    params: &ModelParams,
    cfg: &PipelineConfig,
) -> Result<LabelMap> {
    let seeds = sample_seeds(&bundle.s, cfg)?;
    let cands = predict_instances(bundle, &seeds, params, cfg)?;
    let cands = merge_redundant(cands, cfg);
    Ok(flatten(&cands, bundle.height(), bundle.width()))
}

/// Forward pass plus postprocessing; deterministic.
pub fn infer(x: &Tensor, params: &ModelParams, cfg: &PipelineConfig) -> Result<LabelMap> {
    let bundle = params.forward_eval(x)?;
    infer_with(&bundle, params, cfg)
}

fn reflect_pad_image(x: &Tensor, pad_h: usize, pad_w: usize) -> Result<Tensor> {
    let s = x.shape().to_vec();
    if pad_h == 0 && pad_w == 0 {
        return Ok(x.clone());
    }
    let mut g = Graph::new();
    let v = g.leaf(x.reshaped(vec![1, s[0], s[1], s[2]])?, false);
    let p = g.reflect_pad(v, pad_h, pad_w)?;
    g.value(p).reshaped(vec![s[0], s[1] + pad_h, s[2] + pad_w])
}

/// Median of the ensemble logits at one pixel. The 16 variants double up
/// each of the 8 distinct symmetries, so values arrive in duplicated pairs;
/// with an even count the median is the mean of the two central values.
fn median_even(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n.is_multiple_of(2) {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    } else {
        values[n / 2]
    }
}

/// Dihedral test-time ensemble over a caller-supplied forward function.
/// `forward(t)` must return the feature bundle of the square padded input
/// transformed by `t`, in the transformed frame. Seed maps are mapped back
/// and averaged; seeds are sampled once on the average; each candidate's
/// logits are the per-pixel median over all 16 variants.
pub fn tta_infer_with(
    h: usize,
    w: usize,
    forward: &dyn Fn(Dihedral) -> Result<FeatureBundle>,
    params: &ModelParams,
    cfg: &PipelineConfig,
) -> Result<LabelMap> {
    cfg.validate()?;
    if !cfg.tta {
        return Err(Error::invalid("tta_infer", "config has tta disabled"));
    }
    let n = h.max(w);
    // the 16 rotation x flip x flip variants cover each symmetry exactly twice
    let mut multiplicity: HashMap<Dihedral, usize> = HashMap::new();
    for t in Dihedral::tta_variants() {
        *multiplicity.entry(t).or_insert(0) += 1;
    }
    let elements = Dihedral::elements();
    debug_assert!(elements.iter().all(|t| multiplicity[t] == 2));

    let bundles: Vec<FeatureBundle> = elements
        .iter()
        .map(|&t| {
            let b = forward(t)?;
            if b.height() != n || b.width() != n {
                return Err(Error::invalid(
                    "tta_infer",
                    format!("forward returned {}x{}, expected {n}x{n}", b.height(), b.width()),
                ));
            }
            check_bundle(&b, params)?;
            Ok(b)
        })
        .collect::<Result<_>>()?;

    let mut s_avg = vec![0.0; n * n];
    for (t, b) in elements.iter().zip(&bundles) {
        let back = t.inverse().apply_plane(b.s.data(), n, n);
        for (acc, v) in s_avg.iter_mut().zip(back) {
            *acc += v;
        }
    }
    let mut s_crop = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            s_crop[y * w + x] = s_avg[y * n + x] / elements.len() as f64;
        }
    }
    let seeds = sample_seeds(&Tensor::new(vec![h, w], s_crop)?, cfg)?;

    let (d_p, d_e) = (params.config.d_p, params.config.d_e);
    let mut cands = Vec::new();
    for &seed in &seeds {
        let rect = seed_window(seed.row, seed.col, h, w, cfg.crop_size);
        let mut per_pixel: Vec<Vec<f64>> = vec![Vec::with_capacity(16); rect.area()];
        for (t, bundle) in elements.iter().zip(&bundles) {
            let (tr, tc) = t.map_point(seed.row, seed.col, n, n);
            let trect = t.map_rect(rect, n, n);
            let (offsets, e_crop) = crop_offsets(bundle, trect, tr, tc, d_p, d_e);
            let (logits_t, _) = phi_logits(params, offsets, e_crop, trect.height, trect.width)?;
            let logits_o = t.inverse().apply_plane(&logits_t, trect.height, trect.width);
            let weight = multiplicity[t];
            for (i, &v) in logits_o.iter().enumerate() {
                for _ in 0..weight {
                    per_pixel[i].push(v);
                }
            }
        }
        let logits: Vec<f64> = per_pixel.iter_mut().map(|v| median_even(v)).collect();
        if let Some(c) = candidate_from_logits(seed, rect, logits) {
            cands.push(c);
        }
    }
    let cands = merge_redundant(cands, cfg);
    Ok(flatten(&cands, h, w))
}

/// Test-time ensembling around the real model: the input is reflect-padded
/// to a square so quarter rotations keep its frame, each variant runs a
/// normal forward pass, and the result is cropped back.
pub fn tta_infer(x: &Tensor, params: &ModelParams, cfg: &PipelineConfig) -> Result<LabelMap> {
    let s = x.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::invalid("tta_infer", format!("expected (c, h, w) image, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let n = h.max(w);
    let padded = reflect_pad_image(x, n - h, n - w)?;
    let forward = |t: Dihedral| -> Result<FeatureBundle> {
        let xt = t.apply_chw(padded.data(), c, n, n);
        params.forward_eval(&Tensor::new(vec![c, n, n], xt)?)
    };
    tta_infer_with(h, w, &forward, params, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelmap::binary_iou;
    use crate::synth::{gen_sample, SynthConfig};

    fn bump_map(h: usize, w: usize, peaks: &[(usize, usize, f64)]) -> Tensor {
        let mut d = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                for &(py, px, amp) in peaks {
                    let dist = (y as f64 - py as f64).abs() + (x as f64 - px as f64).abs();
                    d[y * w + x] = f64::max(d[y * w + x], amp - 0.05 * dist);
                }
            }
        }
        Tensor::new(vec![h, w], d).unwrap()
    }

    fn disk_labels(h: usize, w: usize, disks: &[(usize, usize, f64)]) -> LabelMap {
        let mut l = LabelMap::new(h, w);
        for (i, &(cy, cx, r)) in disks.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy as f64).powi(2) + (x as f64 - cx as f64).powi(2);
                    if d2 <= r * r {
                        l.set(y, x, i as u32 + 1);
                    }
                }
            }
        }
        l.relabel_sequential()
    }

    fn partitions_match(a: &LabelMap, b: &LabelMap) -> bool {
        a.relabel_sequential().data() == b.relabel_sequential().data()
    }

    fn transform_labels(l: &LabelMap, t: Dihedral) -> LabelMap {
        let (h, w) = (l.height(), l.width());
        let data = t.apply_plane(l.data(), h, w);
        let (nh, nw) = t.out_dims(h, w);
        LabelMap::from_raw(nh, nw, data).unwrap()
    }

    #[test]
    fn single_bump_yields_single_seed() {
        let s = bump_map(32, 32, &[(10, 14, 0.9)]);
        let seeds = sample_seeds(&s, &PipelineConfig::default()).unwrap();
        assert_eq!(seeds.len(), 1);
        assert_eq!((seeds[0].row, seeds[0].col), (10, 14));
        assert!((seeds[0].score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn distant_bumps_yield_ordered_seeds() {
        let s = bump_map(40, 40, &[(8, 8, 0.8), (30, 30, 0.95)]);
        let seeds = sample_seeds(&s, &PipelineConfig::default()).unwrap();
        assert_eq!(seeds.len(), 2);
        assert_eq!((seeds[0].row, seeds[0].col), (30, 30));
        assert_eq!((seeds[1].row, seeds[1].col), (8, 8));
    }

    #[test]
    fn subthreshold_map_yields_nothing() {
        let s = bump_map(16, 16, &[(8, 8, 0.4)]);
        assert!(sample_seeds(&s, &PipelineConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn plateau_keeps_raster_first_pixel() {
        let mut d = vec![0.0; 16 * 16];
        for y in 6..9 {
            for x in 6..9 {
                d[y * 16 + x] = 0.8;
            }
        }
        let s = Tensor::new(vec![16, 16], d).unwrap();
        let seeds = sample_seeds(&s, &PipelineConfig::default()).unwrap();
        assert_eq!(seeds.len(), 1);
        assert_eq!((seeds[0].row, seeds[0].col), (6, 6));
    }

    #[test]
    fn equal_separated_peaks_both_survive() {
        let mut d = vec![0.0; 16 * 32];
        d[8 * 32 + 5] = 0.9;
        d[8 * 32 + 25] = 0.9;
        let s = Tensor::new(vec![16, 32], d).unwrap();
        let seeds = sample_seeds(&s, &PipelineConfig::default()).unwrap();
        assert_eq!(seeds.len(), 2);
        // equal scores fall back to raster order
        assert_eq!((seeds[0].row, seeds[0].col), (8, 5));
    }

    #[test]
    fn fixture_recovers_single_disk_exactly() {
        let labels = disk_labels(48, 48, &[(20, 24, 5.0)]);
        let (bundle, params) = analytic_bundle(&labels, 4, 4).unwrap();
        let cfg = PipelineConfig { crop_size: 32, ..Default::default() };
        let seeds = sample_seeds(&bundle.s, &cfg).unwrap();
        assert!(!seeds.is_empty());
        assert_eq!(labels.get(seeds[0].row, seeds[0].col), 1, "seed outside the disk");

        let cands = predict_instances(&bundle, &seeds, &params, &cfg).unwrap();
        let merged = merge_redundant(cands, &cfg);
        assert_eq!(merged.len(), 1);
        let want: Vec<bool> = labels.data().iter().map(|&l| l == 1).collect();
        let mut got = vec![false; 48 * 48];
        for y in 0..48 {
            for x in 0..48 {
                got[y * 48 + x] = merged[0].mask_at(y, x);
            }
        }
        assert_eq!(got, want, "candidate mask differs from the disk");

        let out = infer_with(&bundle, &params, &cfg).unwrap();
        assert!(partitions_match(&out, &labels));
    }

    #[test]
    fn fixture_on_background_only_is_empty() {
        let labels = LabelMap::new(40, 40);
        let (bundle, params) = analytic_bundle(&labels, 4, 4).unwrap();
        let cfg = PipelineConfig::default();
        assert!(sample_seeds(&bundle.s, &cfg).unwrap().is_empty());
        let out = infer_with(&bundle, &params, &cfg).unwrap();
        assert!(out.instance_ids().is_empty());
    }

    #[test]
    fn fixture_separates_two_disks() {
        let labels = disk_labels(64, 64, &[(18, 18, 6.0), (45, 44, 7.0)]);
        let (bundle, params) = analytic_bundle(&labels, 4, 4).unwrap();
        let cfg = PipelineConfig { crop_size: 48, ..Default::default() };
        let seeds = sample_seeds(&bundle.s, &cfg).unwrap();
        let cands = predict_instances(&bundle, &seeds, &params, &cfg).unwrap();
        let merged = merge_redundant(cands, &cfg);
        assert_eq!(merged.len(), 2);
        let mut overlap = 0;
        for y in 0..64 {
            for x in 0..64 {
                if merged[0].mask_at(y, x) && merged[1].mask_at(y, x) {
                    overlap += 1;
                }
            }
        }
        assert_eq!(overlap, 0, "candidate masks overlap");
        let out = infer_with(&bundle, &params, &cfg).unwrap();
        assert!(partitions_match(&out, &labels));
    }

    #[test]
    fn fixture_recovers_synthetic_scene() {
        let cfg_s = SynthConfig { size: 96, count_min: 5, count_max: 9, seed: 3, ..Default::default() };
        let (_, labels) = gen_sample(&cfg_s, 0).unwrap();
        let (bundle, params) = analytic_bundle(&labels, 4, 4).unwrap();
        let cfg = PipelineConfig { crop_size: 64, ..Default::default() };
        let out = infer_with(&bundle, &params, &cfg).unwrap();
        assert_eq!(out.instance_ids().len(), labels.instance_ids().len());
        // per-instance IoU against the matching ground-truth instance
        for id in labels.instance_ids() {
            let want = labels.binary_mask(id);
            let best = out
                .instance_ids()
                .iter()
                .map(|&p| binary_iou(out.binary_mask(p).data(), want.data()))
                .fold(0.0, f64::max);
            assert!(best >= 0.9, "instance {id} recovered with IoU {best}");
        }
    }

    #[test]
    fn zero_seeds_mean_zero_candidates() {
        let labels = disk_labels(32, 32, &[(16, 16, 5.0)]);
        let (bundle, params) = analytic_bundle(&labels, 4, 4).unwrap();
        let cands =
            predict_instances(&bundle, &[], &params, &PipelineConfig::default()).unwrap();
        assert!(cands.is_empty());
    }

    #[test]
    fn duplicate_candidates_collapse_to_one() {
        let labels = disk_labels(48, 48, &[(24, 24, 8.0)]);
        let (bundle, params) = analytic_bundle(&labels, 4, 4).unwrap();
        let cfg = PipelineConfig { crop_size: 40, ..Default::default() };
        // two hand-placed seeds inside the same instance
        let seeds = [
            Seed { row: 22, col: 22, score: 0.9 },
            Seed { row: 26, col: 27, score: 0.8 },
        ];
        let cands = predict_instances(&bundle, &seeds, &params, &cfg).unwrap();
        assert_eq!(cands.len(), 2);
        let merged = merge_redundant(cands.clone(), &cfg);
        assert_eq!(merged.len(), 1, "fragments of one instance must merge");
        let again = merge_redundant(merged.clone(), &cfg);
        assert_eq!(again, merged, "merge is not idempotent");

        let out = flatten(&merged, 48, 48);
        assert_eq!(out.instance_ids().len(), 1);
    }

    #[test]
    fn disjoint_candidates_stay_separate() {
        let mk = |top: usize, left: usize| InstanceCandidate {
            seed: Seed { row: top + 1, col: left + 1, score: 0.9 },
            window: Rect { top, left, height: 4, width: 4 },
            logits: vec![1.0; 16],
            mask: vec![true; 16],
        };
        let cfg = PipelineConfig::default();
        let merged = merge_redundant(vec![mk(0, 0), mk(10, 10)], &cfg);
        assert_eq!(merged.len(), 2);
    }

    #[test]
    fn flatten_applies_threshold_argmax_and_tie_rule() {
        let c1 = InstanceCandidate {
            seed: Seed { row: 0, col: 0, score: 0.9 },
            window: Rect { top: 0, left: 0, height: 1, width: 3 },
            logits: vec![2.0, -0.1, 0.5],
            mask: vec![true, false, true],
        };
        let c2 = InstanceCandidate {
            seed: Seed { row: 0, col: 1, score: 0.8 },
            window: Rect { top: 0, left: 0, height: 1, width: 3 },
            logits: vec![1.0, -0.2, 0.5],
            mask: vec![true, false, true],
        };
        let out = flatten(&[c1, c2], 1, 3);
        // pixel 0: 2.0 beats 1.0; pixel 1: max logit below zero; pixel 2: tie
        assert_eq!(out.data(), &[1, 0, 1]);
    }

    #[test]
    fn prediction_memory_tracks_seeds_not_image() {
        let cfg = PipelineConfig { crop_size: 32, ..Default::default() };
        let mut peaks = Vec::new();
        for i in 0..4 {
            peaks.push((40 + 60 * (i / 2), 40 + 60 * (i % 2), 6.0));
        }
        let small = disk_labels(160, 160, &peaks[..2]);
        let large = disk_labels(320, 320, &peaks[..2]);
        let (b_small, params) = analytic_bundle(&small, 4, 4).unwrap();
        let (b_large, _) = analytic_bundle(&large, 4, 4).unwrap();
        let seeds = [Seed { row: 40, col: 40, score: 0.9 }, Seed { row: 40, col: 100, score: 0.8 }];
        let (_, st_small) = predict_instances_accounted(&b_small, &seeds, &params, &cfg).unwrap();
        let (_, st_large) = predict_instances_accounted(&b_large, &seeds, &params, &cfg).unwrap();
        assert_eq!(st_small.peak_bytes, st_large.peak_bytes, "footprint follows image size");

        let (_, st_one) =
            predict_instances_accounted(&b_large, &seeds[..1], &params, &cfg).unwrap();
        assert!(st_large.retained_bytes > st_one.retained_bytes);
        assert!(st_large.peak_bytes < 2 * st_one.peak_bytes + st_large.retained_bytes);
    }

    #[test]
    fn untrained_model_inference_is_deterministic() {
        let arch = ArchitectureConfig {
            in_channels: 1,
            widths: vec![4, 8],
            d_f: 4,
            d_p: 2,
            d_e: 2,
            phi_hidden: 6,
            seed: 5,
        };
        let params = ModelParams::build(arch).unwrap();
        let x = {
            let mut s = 77u64;
            let data: Vec<f64> = (0..48 * 48)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                    (s >> 11) as f64 / (1u64 << 53) as f64
                })
                .collect();
            Tensor::new(vec![1, 48, 48], data).unwrap()
        };
        let cfg = PipelineConfig { crop_size: 32, ..Default::default() };
        let a = infer(&x, &params, &cfg).unwrap();
        let b = infer(&x, &params, &cfg).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn tta_matches_plain_inference_on_equivariant_features() {
        let labels = disk_labels(64, 64, &[(20, 16, 6.0), (44, 46, 7.0), (18, 47, 5.0)]);
        let (bundle, params) = analytic_bundle(&labels, 4, 4).unwrap();
        let cfg = PipelineConfig { crop_size: 48, tta: true, ..Default::default() };
        let plain = infer_with(&bundle, &params, &cfg).unwrap();

        let forward = |t: Dihedral| -> Result<FeatureBundle> {
            Ok(analytic_bundle(&transform_labels(&labels, t), 4, 4)?.0)
        };
        let tta = tta_infer_with(64, 64, &forward, &params, &cfg).unwrap();
        assert!(partitions_match(&tta, &plain), "tta diverged on equivariant features");
    }

    #[test]
    fn tta_requires_the_flag() {
        let labels = disk_labels(32, 32, &[(16, 16, 5.0)]);
        let (_, params) = analytic_bundle(&labels, 4, 4).unwrap();
        let cfg = PipelineConfig::default(); // tta off
        let forward = |_: Dihedral| -> Result<FeatureBundle> { unreachable!() };
        assert!(tta_infer_with(32, 32, &forward, &params, &cfg).is_err());
    }

    #[test]
    fn fixture_inference_is_dihedral_equivariant() {
        let labels = disk_labels(56, 56, &[(16, 20, 5.0), (38, 40, 6.0)]);
        let cfg = PipelineConfig { crop_size: 40, ..Default::default() };
        let (bundle, params) = analytic_bundle(&labels, 4, 4).unwrap();
        let base = infer_with(&bundle, &params, &cfg).unwrap();
        for t in Dihedral::elements() {
            let tl = transform_labels(&labels, t);
            let (tb, tp) = analytic_bundle(&tl, 4, 4).unwrap();
            let out = infer_with(&tb, &tp, &cfg).unwrap();
            let expected = transform_labels(&base, t);
            assert!(partitions_match(&out, &expected), "equivariance broken for {t:?}");
        }
    }

    #[test]
    fn config_bounds_are_enforced() {
        let bad = PipelineConfig { crop_size: 31, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = PipelineConfig { seed_threshold: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = PipelineConfig { merge_iou: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
