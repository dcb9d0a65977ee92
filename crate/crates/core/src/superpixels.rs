//! SLIC superpixels, region occlusion and aspect-preserving region crops.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ImageTensor, PixelBox};

/// Default number of requested segments.
pub const DEFAULT_SEGMENTS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlicParams {
    pub requested_segments: usize,
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        SlicParams {
            requested_segments: DEFAULT_SEGMENTS,
            compactness: 10.0,
            iterations: 10,
        }
    }
}

impl SlicParams {
    pub fn with_segments(requested_segments: usize) -> Self {
        SlicParams {
            requested_segments,
            ..Self::default()
        }
    }
}

/// Per-pixel segment labels, canonicalized so label ids follow the row-major
/// order of each segment's first pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    labels: Vec<u32>,
    height: usize,
    width: usize,
    n_segments: usize,
    params: SlicParams,
}

impl Segmentation {
    /// Canonicalizes an arbitrary label map. Each distinct input label becomes
    /// one segment; connectivity is not enforced.
    pub fn from_labels(labels: &[u32], height: usize, width: usize, params: SlicParams) -> Result<Self> {
        if labels.len() != height * width || labels.is_empty() {
            return Err(Error::dim("label map", height * width, labels.len()));
        }
        let (labels, n_segments) = canonicalize(labels);
        Ok(Segmentation {
            labels,
            height,
            width,
            n_segments,
            params,
        })
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    pub fn params(&self) -> &SlicParams {
        &self.params
    }

    #[inline]
    pub fn label_at(&self, row: usize, col: usize) -> usize {
        self.labels[row * self.width + col] as usize
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_segments];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.n_segments {
            return Err(Error::Bounds(format!(
                "segment {label} not in segmentation with {} segments",
                self.n_segments
            )));
        }
        Ok(())
    }

    /// Pixel mask (row-major) of the union of `labels`.
    pub fn mask_of(&self, labels: &[usize]) -> Result<Vec<bool>> {
        let mut chosen = vec![false; self.n_segments];
        for &l in labels {
            self.check_label(l)?;
            chosen[l] = true;
        }
        Ok(self.labels.iter().map(|&l| chosen[l as usize]).collect())
    }

    /// Tight bounding box of one segment.
    pub fn bounding_box(&self, label: usize) -> Result<PixelBox> {
        self.check_label(label)?;
        let (mut top, mut left, mut bottom, mut right) = (usize::MAX, usize::MAX, 0, 0);
        for (p, &l) in self.labels.iter().enumerate() {
            if l as usize == label {
                let (r, c) = (p / self.width, p % self.width);
                top = top.min(r);
                left = left.min(c);
                bottom = bottom.max(r + 1);
                right = right.max(c + 1);
            }
        }
        PixelBox::new(top, left, bottom, right)
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        if image.height() != self.height || image.width() != self.width {
            return Err(Error::Bounds(format!(
                "segmentation is {}x{} but image is {}x{}",
                self.height,
                self.width,
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    /// Writes the label map as a 16-bit grayscale PNG.
    pub fn save_label_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> = image::ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.labels.iter().map(|&l| l.min(u16::MAX as u32) as u16).collect(),
        )
        .expect("buffer sized from segmentation");
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn canonicalize(labels: &[u32]) -> (Vec<u32>, usize) {
    let mut remap = std::collections::HashMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = remap.len() as u32;
            *remap.entry(*l).or_insert(next)
        })
        .collect();
    (out, remap.len())
}

/// Grid of seed rows x cols whose product approximates `k` for an `h x w` image.
fn seed_grid(k: usize, h: usize, w: usize) -> (usize, usize) {
    let rows = ((k as f64 * h as f64 / w as f64).sqrt().round() as usize).clamp(1, h);
    let cols = ((k as f64 / rows as f64).round() as usize).clamp(1, w);
    (rows, cols)
}

/// SLIC: k-means in joint (colour, position) space seeded on a regular grid,
/// followed by connectivity enforcement that merges orphan fragments into
/// their largest neighbouring segment.
///
/// Colour channels are linearly rescaled (global min/max over all channels)
/// to `[0, 100]` so `compactness` has the usual meaning.
pub fn slic(image: &ImageTensor, params: SlicParams) -> Result<Segmentation> {
    let (channels, h, w) = image.shape();
    let n = h * w;
    let k = params.requested_segments;
    if k == 0 {
        return Err(Error::Parameter("requested_segments must be >= 1".into()));
    }
    if k > n {
        return Err(Error::Parameter(format!(
            "requested {k} segments for an image of {n} pixels"
        )));
    }
    if !(params.compactness > 0.0) {
        return Err(Error::Parameter("compactness must be positive".into()));
    }

    let px = image.pixels();
    let (lo, hi) = px
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let span = (hi - lo) as f64;
    let colour = |c: usize, p: usize| -> f64 {
        if span > 0.0 {
            (px[c * n + p] - lo) as f64 / span * 100.0
        } else {
            0.0
        }
    };

    let (grid_rows, grid_cols) = seed_grid(k, h, w);
    let step = (n as f64 / (grid_rows * grid_cols) as f64).sqrt();
    let weight = (params.compactness / step).powi(2);
    let dims = 2 + channels;
    let mut centers: Vec<f64> = Vec::with_capacity(grid_rows * grid_cols * dims);
    for gr in 0..grid_rows {
        for gc in 0..grid_cols {
            let y = (gr as f64 + 0.5) * h as f64 / grid_rows as f64;
            let x = (gc as f64 + 0.5) * w as f64 / grid_cols as f64;
            let p = (y as usize).min(h - 1) * w + (x as usize).min(w - 1);
            centers.push(y);
            centers.push(x);
            for c in 0..channels {
                centers.push(colour(c, p));
            }
        }
    }
    let n_centers = centers.len() / dims;
    let dist_to = |center: &[f64], p: usize| -> f64 {
        let (y, x) = ((p / w) as f64 + 0.5, (p % w) as f64 + 0.5);
        let ds = (y - center[0]).powi(2) + (x - center[1]).powi(2);
        let dc: f64 = (0..channels).map(|c| (colour(c, p) - center[2 + c]).powi(2)).sum();
        dc + ds * weight
    };

    let mut assign = vec![u32::MAX; n];
    let mut best = vec![f64::INFINITY; n];
    for _ in 0..params.iterations.max(1) {
        assign.fill(u32::MAX);
        best.fill(f64::INFINITY);
        for (ci, center) in centers.chunks_exact(dims).enumerate() {
            let r0 = (center[0] - step).floor().max(0.0) as usize;
            let r1 = ((center[0] + step).ceil() as usize).min(h);
            let c0 = (center[1] - step).floor().max(0.0) as usize;
            let c1 = ((center[1] + step).ceil() as usize).min(w);
            for r in r0..r1 {
                for c in c0..c1 {
                    let p = r * w + c;
                    let d = dist_to(center, p);
                    if d < best[p] {
                        best[p] = d;
                        assign[p] = ci as u32;
                    }
                }
            }
        }
        // pixels outside every search window go to the globally nearest centre
        for p in 0..n {
            if assign[p] == u32::MAX {
                let mut bi = 0;
                let mut bd = f64::INFINITY;
                for (ci, center) in centers.chunks_exact(dims).enumerate() {
                    let d = dist_to(center, p);
                    if d < bd {
                        bd = d;
                        bi = ci;
                    }
                }
                assign[p] = bi as u32;
            }
        }
        let mut sums = vec![0.0f64; n_centers * dims];
        let mut counts = vec![0usize; n_centers];
        for p in 0..n {
            let ci = assign[p] as usize;
            let s = &mut sums[ci * dims..(ci + 1) * dims];
            s[0] += (p / w) as f64 + 0.5;
            s[1] += (p % w) as f64 + 0.5;
            for c in 0..channels {
                s[2 + c] += colour(c, p);
            }
            counts[ci] += 1;
        }
        for ci in 0..n_centers {
            if counts[ci] > 0 {
                for d in 0..dims {
                    centers[ci * dims + d] = sums[ci * dims + d] / counts[ci] as f64;
                }
            }
        }
    }

    let min_size = (n / n_centers / 4).max(1);
    let labels = enforce_connectivity(&assign, h, w, min_size);
    let (labels, n_segments) = canonicalize(&labels);
    Ok(Segmentation {
        labels,
        height: h,
        width: w,
        n_segments,
        params,
    })
}

/// 4-connected components of a label map, returned as per-pixel component ids.
pub(crate) fn components(labels: &[u32], h: usize, w: usize) -> (Vec<usize>, usize) {
    let mut comp = vec![usize::MAX; labels.len()];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if comp[q] == usize::MAX && labels[q] == labels[p] {
                    comp[q] = next;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        next += 1;
    }
    (comp, next)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

fn enforce_connectivity(assign: &[u32], h: usize, w: usize, min_size: usize) -> Vec<u32> {
    let (comp, n_comp) = components(assign, h, w);
    let mut size = vec![0usize; n_comp];
    let mut cluster = vec![0u32; n_comp];
    for (p, &c) in comp.iter().enumerate() {
        size[c] += 1;
        cluster[c] = assign[p];
    }
    let mut adjacent: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_comp];
    for p in 0..comp.len() {
        let (r, c) = (p / w, p % w);
        if c + 1 < w && comp[p] != comp[p + 1] {
            adjacent[comp[p]].insert(comp[p + 1]);
            adjacent[comp[p + 1]].insert(comp[p]);
        }
        if r + 1 < h && comp[p] != comp[p + w] {
            adjacent[comp[p]].insert(comp[p + w]);
            adjacent[comp[p + w]].insert(comp[p]);
        }
    }
    // the largest fragment of each cluster keeps the cluster; first found wins ties
    let mut primary = std::collections::HashMap::new();
    for c in 0..n_comp {
        let e = primary.entry(cluster[c]).or_insert(c);
        if size[c] > size[*e] {
            *e = c;
        }
    }
    let mut orphans: Vec<usize> = (0..n_comp)
        .filter(|&c| primary[&cluster[c]] != c || size[c] < min_size)
        .collect();
    orphans.sort_by_key(|&c| (size[c], c));

    let mut parent: Vec<usize> = (0..n_comp).collect();
    let mut group_size = size.clone();
    let mut members: Vec<Vec<usize>> = (0..n_comp).map(|c| vec![c]).collect();
    for orphan in orphans {
        let own = find(&mut parent, orphan);
        let mut target: Option<usize> = None;
        let neighbours: Vec<usize> = members[own]
            .iter()
            .flat_map(|m| adjacent[*m].iter().copied())
            .collect();
        for nb in neighbours {
            let g = find(&mut parent, nb);
            if g == own {
                continue;
            }
            target = match target {
                Some(t) if (group_size[t], std::cmp::Reverse(t)) >= (group_size[g], std::cmp::Reverse(g)) => Some(t),
                _ => Some(g),
            };
        }
        if let Some(t) = target {
            parent[own] = t;
            group_size[t] += group_size[own];
            let moved = std::mem::take(&mut members[own]);
            members[t].extend(moved);
        }
    }
    comp.iter().map(|&c| find(&mut parent, c) as u32).collect()
}

fn label_mask(seg: &Segmentation, image: &ImageTensor, labels: &[usize]) -> Result<Vec<bool>> {
    seg.check_image(image)?;
    seg.mask_of(labels)
}

/// Keeps the pixels of `keep`, filling everything else. An empty `keep`
/// yields a fully occluded image.
pub fn occlude_except(image: &ImageTensor, seg: &Segmentation, keep: &[usize], fill: f32) -> Result<ImageTensor> {
    let kept = label_mask(seg, image, keep)?;
    let replace: Vec<bool> = kept.iter().map(|k| !k).collect();
    image.masked(&replace, fill)
}

/// Fills the pixels of `remove`, keeping everything else.
pub fn occlude_only(image: &ImageTensor, seg: &Segmentation, remove: &[usize], fill: f32) -> Result<ImageTensor> {
    let removed = label_mask(seg, image, remove)?;
    image.masked(&removed, fill)
}

/// A segment cropped to its bounding box and rescaled onto a model-sized canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionCrop {
    pub image: ImageTensor,
    /// Where the scaled content sits on the canvas.
    pub content: PixelBox,
    /// Source region was a single pixel.
    pub degenerate: bool,
}

/// Crops `label`'s bounding box (other segments inside the box filled), scales
/// it uniformly so it fits `target` with its longer side touching the canvas
/// edge, and centres it on a fill-valued canvas.
pub fn crop_upsample_region(
    image: &ImageTensor,
    seg: &Segmentation,
    label: usize,
    target: (usize, usize),
    fill: f32,
) -> Result<RegionCrop> {
    seg.check_image(image)?;
    let bbox = seg.bounding_box(label)?;
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Bounds("empty crop target".into()));
    }
    let (bh, bw) = (bbox.height(), bbox.width());
    let scale = (th as f64 / bh as f64).min(tw as f64 / bw as f64);
    let ch = ((bh as f64 * scale).round() as usize).clamp(1, th);
    let cw = ((bw as f64 * scale).round() as usize).clamp(1, tw);
    let top = (th - ch) / 2;
    let left = (tw - cw) / 2;
    let content = PixelBox::new(top, left, top + ch, left + cw)?;
    let degenerate = bh == 1 && bw == 1;

    let channels = image.channels();
    let source = |c: usize, r: usize, col: usize| -> f32 {
        let (r, col) = (bbox.top + r, bbox.left + col);
        if seg.label_at(r, col) == label {
            image.get(c, r, col)
        } else {
            fill
        }
    };
    let axis = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f32) {
        let pos = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let lo = pos.floor() as usize;
        (lo, (lo + 1).min(src_len - 1), (pos - lo as f64) as f32)
    };
    let mut pixels = vec![fill; channels * th * tw];
    for y in 0..ch {
        let (r0, r1, fy) = axis(y, bh, ch);
        for x in 0..cw {
            let (c0, c1, fx) = axis(x, bw, cw);
            for c in 0..channels {
                let top_v = source(c, r0, c0) * (1.0 - fx) + source(c, r0, c1) * fx;
                let bottom_v = source(c, r1, c0) * (1.0 - fx) + source(c, r1, c1) * fx;
                pixels[(c * th + top + y) * tw + left + x] = top_v * (1.0 - fy) + bottom_v * fy;
            }
        }
    }
    let image = ImageTensor::new(pixels, channels, th, tw, image.source_path())?;
    Ok(RegionCrop {
        image,
        content,
        degenerate,
    })
}
