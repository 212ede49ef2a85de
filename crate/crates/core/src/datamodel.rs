//! Samples, dataset ingestion, synthetic RGB-D generation, edge labels and
//! augmentation.
//!
//! Every grid is stored as a single-sample [`Tensor`] (`[1, c, h, w]`): RGB has
//! three channels, depth, ground truth and edge one each.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::check_input_size;
use crate::kernels::resize_forward;
use crate::par;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Band of the derived edge labels.
pub const EDGE_BAND: usize = 1;
/// 8-bit masks are foreground above this value.
pub const MASK_THRESHOLD: u8 = 127;

/// One RGB-D training or evaluation item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePair {
    pub id: String,
    pub rgb: Tensor,
    pub depth: Tensor,
    pub gt: Tensor,
    pub edge: Tensor,
}

impl SamplePair {
    /// Builds a sample, deriving the edge map from `gt`.
    pub fn new(id: impl Into<String>, rgb: Tensor, depth: Tensor, gt: Tensor) -> Result<Self> {
        let id = id.into();
        let [_, _, h, w] = rgb.shape();
        for (what, t, c) in [("rgb", &rgb, 3), ("depth", &depth, 1), ("gt", &gt, 1)] {
            if t.shape() != [1, c, h, w] {
                return Err(Error::StemSizeMismatch {
                    stem: id,
                    detail: format!("{what} has shape {:?}, expected {:?}", t.shape(), [1, c, h, w]),
                });
            }
        }
        let edge = derive_edge_map(&gt, EDGE_BAND)?;
        Ok(Self { id, rgb, depth, gt, edge })
    }

    pub fn size(&self) -> (usize, usize) {
        self.gt.spatial()
    }

    /// Resizes all grids: bilinear for images, nearest for masks.
    pub fn resized(&self, size: usize) -> Self {
        Self {
            id: self.id.clone(),
            rgb: resize_bilinear(&self.rgb, size, size),
            depth: resize_bilinear(&self.depth, size, size),
            gt: resize_nearest(&self.gt, size, size),
            edge: resize_nearest(&self.edge, size, size),
        }
    }
}

/// Samples stacked along the batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub rgb: Tensor,
    pub depth: Tensor,
    pub gt: Tensor,
    pub edge: Tensor,
}

impl Batch {
    pub fn collate(samples: &[&SamplePair]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("batch"));
        }
        let size = samples[0].size();
        if let Some(s) = samples.iter().find(|s| s.size() != size) {
            return Err(Error::Shape(format!("sample {} is {:?}, batch is {size:?}", s.id, s.size())));
        }
        let stack = |f: fn(&SamplePair) -> &Tensor| {
            Tensor::stack(&samples.iter().map(|s| f(s).clone()).collect::<Vec<_>>())
        };
        Ok(Self {
            rgb: stack(|s| &s.rgb),
            depth: stack(|s| &s.depth),
            gt: stack(|s| &s.gt),
            edge: stack(|s| &s.edge),
        })
    }

    pub fn len(&self) -> usize {
        self.gt.n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Bilinear resize with half-pixel centres.
pub fn resize_bilinear(t: &Tensor, oh: usize, ow: usize) -> Tensor {
    let [n, c, h, w] = t.shape();
    if (h, w) == (oh, ow) {
        return t.clone();
    }
    Tensor::from_vec([n, c, oh, ow], resize_forward(t.data(), n * c, h, w, oh, ow))
}

/// Nearest-neighbour resize; keeps masks binary.
pub fn resize_nearest(t: &Tensor, oh: usize, ow: usize) -> Tensor {
    let [n, c, h, w] = t.shape();
    let src = |o: usize, len: usize, olen: usize| (((o as f64 + 0.5) * len as f64 / olen as f64) as usize).min(len - 1);
    Tensor::from_fn([n, c, oh, ow], |[s, ch, y, x]| t.at([s, ch, src(y, h, oh), src(x, w, ow)]))
}

fn morph(mask: &[bool], h: usize, w: usize, dilate: bool) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = mask[y * w + x];
            let neighbours = [
                (y > 0).then(|| (y - 1) * w + x),
                (y + 1 < h).then(|| (y + 1) * w + x),
                (x > 0).then(|| y * w + x - 1),
                (x + 1 < w).then(|| y * w + x + 1),
            ];
            for i in neighbours.into_iter().flatten() {
                if dilate {
                    acc |= mask[i];
                } else {
                    acc &= mask[i];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Morphological gradient of a binary mask with a 3×3 cross structuring
/// element applied `band` times.
///
/// Neighbourhoods are clipped to the image, so the result is identical for a
/// mask and its complement.
pub fn derive_edge_map(gt: &Tensor, band: usize) -> Result<Tensor> {
    if band == 0 {
        return Err(Error::InvalidArgument("edge band must be >= 1".into()));
    }
    let [n, c, h, w] = gt.shape();
    let mut out = Tensor::zeros([n, c, h, w]);
    for p in 0..n * c {
        let plane = &gt.data()[p * h * w..(p + 1) * h * w];
        let mask: Vec<bool> = plane.iter().map(|v| *v > 0.5).collect();
        let (mut dil, mut ero) = (mask.clone(), mask);
        for _ in 0..band {
            dil = morph(&dil, h, w, true);
            ero = morph(&ero, h, w, false);
        }
        let dst = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
        for (i, v) in dst.iter_mut().enumerate() {
            *v = f64::from(u8::from(dil[i] != ero[i]));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthMode {
    /// Objects sit on their own depth planes in front of a background ramp.
    #[default]
    Faithful,
    /// Constant depth everywhere.
    Flat,
    /// I.i.d. uniform noise unrelated to the scene.
    Noise,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RgbMode {
    /// Plain background, distinctly coloured objects.
    #[default]
    Clean,
    /// Background covered with object-like distractors and stripes.
    Cluttered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub image_size: usize,
    pub depth_mode: DepthMode,
    pub rgb_mode: RgbMode,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_samples: 8,
            image_size: 64,
            depth_mode: DepthMode::Faithful,
            rgb_mode: RgbMode::Clean,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
        }
        check_input_size(self.image_size, self.image_size)
    }
}

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Ellipse,
    Rect,
    Triangle,
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    kind: ShapeKind,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, s: f64, min_r: f64, max_r: f64) -> Self {
        let kind = match rng.gen_range(0..3) {
            0 => ShapeKind::Ellipse,
            1 => ShapeKind::Rect,
            _ => ShapeKind::Triangle,
        };
        let ry = rng.gen_range(min_r..max_r) * s;
        let rx = rng.gen_range(min_r..max_r) * s;
        Self {
            kind,
            cy: rng.gen_range(ry..s - ry),
            cx: rng.gen_range(rx..s - rx),
            ry,
            rx,
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        match self.kind {
            ShapeKind::Ellipse => dy * dy + dx * dx <= 1.0,
            ShapeKind::Rect => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            // Apex at the top, base at the bottom.
            ShapeKind::Triangle => (-1.0..=1.0).contains(&dy) && dx.abs() <= (dy + 1.0) / 2.0,
        }
    }
}

fn random_colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn colour_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn synth_one(spec: &SynthSpec, index: usize) -> Result<SamplePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let s = spec.image_size;
    let sf = s as f64;

    let background = random_colour(&mut rng);
    let n_obj = rng.gen_range(1..=3);
    let objects: Vec<(Blob, [f64; 3], f64)> = (0..n_obj)
        .map(|_| {
            let blob = Blob::random(&mut rng, sf, 0.12, 0.3);
            let colour = loop {
                let c = random_colour(&mut rng);
                if colour_distance(c, background) > 0.9 {
                    break c;
                }
            };
            let plane = rng.gen_range(0.6..0.95);
            (blob, colour, plane)
        })
        .collect();

    let distractors: Vec<(Blob, [f64; 3])> = match spec.rgb_mode {
        RgbMode::Clean => Vec::new(),
        RgbMode::Cluttered => (0..rng.gen_range(3..=6))
            .map(|_| {
                let blob = Blob::random(&mut rng, sf, 0.08, 0.25);
                // Borrow object colours so appearance alone is ambiguous.
                let colour = objects[rng.gen_range(0..objects.len())].1;
                (blob, colour)
            })
            .collect(),
    };
    let stripe_period = rng.gen_range(4.0..10.0);
    let stripe_colour = random_colour(&mut rng);
    let ramp = [rng.gen_range(0.05..0.2), rng.gen_range(-0.1..0.1)];

    let mut rgb = Tensor::zeros([1, 3, s, s]);
    let mut depth = Tensor::zeros([1, 1, s, s]);
    let mut gt = Tensor::zeros([1, 1, s, s]);
    let flat = 0.5;
    for y in 0..s {
        for x in 0..s {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut colour = background;
            if spec.rgb_mode == RgbMode::Cluttered && ((py + px) / stripe_period).floor() as i64 % 2 == 0 {
                colour = stripe_colour;
            }
            for (blob, c) in &distractors {
                if blob.contains(py, px) {
                    colour = *c;
                }
            }
            let mut d = ramp[0] + ramp[1] * py / sf;
            let mut fg = false;
            for (blob, c, plane) in &objects {
                if blob.contains(py, px) {
                    colour = *c;
                    d = *plane;
                    fg = true;
                }
            }
            for (ch, v) in colour.iter().enumerate() {
                rgb.set([0, ch, y, x], *v);
            }
            let dv = match spec.depth_mode {
                DepthMode::Faithful => d.clamp(0.0, 1.0),
                DepthMode::Flat => flat,
                DepthMode::Noise => rng.gen(),
            };
            depth.set([0, 0, y, x], dv);
            gt.set([0, 0, y, x], f64::from(u8::from(fg)));
        }
    }
    SamplePair::new(format!("synth_{:05}", index), rgb, depth, gt)
}

/// Generates `spec.n_samples` pairs; a pure function of `spec`.
///
/// Sample `i` draws from stream `i` of a ChaCha8 generator seeded with
/// `spec.seed`, so samples are independent of generation order.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<SamplePair>> {
    spec.validate()?;
    par::map_range(spec.n_samples, |i| synth_one(spec, i))
        .into_iter()
        .collect()
}

/// Concrete random choices of one augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentParams {
    pub flip: bool,
    pub top: usize,
    pub left: usize,
    pub target: usize,
}

impl AugmentParams {
    pub fn draw(h: usize, w: usize, target: usize, seed: u64) -> Result<Self> {
        if target == 0 || target > h.min(w) {
            return Err(Error::InvalidSize {
                size: target,
                reason: "crop target must be in 1..=min(H, W)",
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            flip: rng.gen_bool(0.5),
            top: rng.gen_range(0..=h - target),
            left: rng.gen_range(0..=w - target),
            target,
        })
    }
}

fn flip_crop(t: &Tensor, p: &AugmentParams) -> Tensor {
    let [n, c, _, w] = t.shape();
    Tensor::from_fn([n, c, p.target, p.target], |[s, ch, y, x]| {
        let sx = p.left + x;
        let sx = if p.flip { w - 1 - sx } else { sx };
        t.at([s, ch, p.top + y, sx])
    })
}

/// Applies explicit augmentation choices: mirror, crop, resize back.
pub fn apply_augment(sample: &SamplePair, p: &AugmentParams) -> Result<SamplePair> {
    let (h, w) = sample.size();
    if p.target == 0 || p.target > h.min(w) || p.top + p.target > h || p.left + p.target > w {
        return Err(Error::InvalidSize {
            size: p.target,
            reason: "crop window exceeds the image",
        });
    }
    Ok(SamplePair {
        id: sample.id.clone(),
        rgb: resize_bilinear(&flip_crop(&sample.rgb, p), h, w),
        depth: resize_bilinear(&flip_crop(&sample.depth, p), h, w),
        gt: resize_nearest(&flip_crop(&sample.gt, p), h, w),
        edge: resize_nearest(&flip_crop(&sample.edge, p), h, w),
    })
}

/// Seeded horizontal flip (p = 0.5) and `target`×`target` random crop, resized
/// back to the sample size.
pub fn augment(sample: &SamplePair, target: usize, seed: u64) -> Result<SamplePair> {
    let (h, w) = sample.size();
    apply_augment(sample, &AugmentParams::draw(h, w, target, seed)?)
}

const SUBDIRS: [&str; 3] = ["rgb", "depth", "gt"];

fn stems_in(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if !stem.starts_with('.') {
                out.push((stem.to_string(), path));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Paths of one stem's files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StemFiles {
    pub stem: String,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub gt: Option<PathBuf>,
}

/// Lists stems in lexicographic order. With `require_gt = false` the `gt/`
/// directory is optional (prediction inputs).
pub fn list_stems(root: &Path, require_gt: bool) -> Result<Vec<StemFiles>> {
    let [rgb, depth, gt] = SUBDIRS.map(|d| stems_in(&root.join(d)));
    let (rgb, depth, gt) = (rgb?, depth?, gt?);
    let all: BTreeSet<&String> = rgb.iter().chain(&depth).chain(&gt).map(|(s, _)| s).collect();
    let find = |v: &[(String, PathBuf)], s: &str| v.iter().find(|(k, _)| k == s).map(|(_, p)| p.clone());
    let mut out = Vec::new();
    for stem in all {
        let r = find(&rgb, stem);
        let d = find(&depth, stem);
        let g = find(&gt, stem);
        let missing = match (&r, &d, &g) {
            (None, _, _) => Some("rgb"),
            (_, None, _) => Some("depth"),
            (_, _, None) if require_gt => Some("gt"),
            _ => None,
        };
        if let Some(missing) = missing {
            if require_gt || missing != "gt" {
                return Err(Error::OrphanStem {
                    stem: stem.clone(),
                    missing,
                });
            }
        }
        out.push(StemFiles {
            stem: stem.clone(),
            rgb: r.expect("checked"),
            depth: d.expect("checked"),
            gt: g,
        });
    }
    Ok(out)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads an 8-bit colour image into `[1, 3, h, w]` in [0, 1].
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    }))
}

/// Reads an 8-bit grayscale image into `[1, 1, h, w]` in [0, 1].
pub fn read_gray(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn([1, 1, h, w], |[_, _, y, x]| {
        f64::from(img.get_pixel(x as u32, y as u32)[0]) / 255.0
    }))
}

/// Reads a mask, binarised at 127/255.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn([1, 1, h, w], |[_, _, y, x]| {
        f64::from(u8::from(img.get_pixel(x as u32, y as u32)[0] > MASK_THRESHOLD))
    }))
}

fn load_stem(f: &StemFiles) -> Result<SamplePair> {
    let rgb = read_rgb(&f.rgb)?;
    let depth = read_gray(&f.depth)?;
    let gt = read_mask(f.gt.as_ref().expect("gt required"))?;
    let (h, w) = rgb.spatial();
    for (what, t) in [("depth", &depth), ("gt", &gt)] {
        if t.spatial() != (h, w) {
            return Err(Error::StemSizeMismatch {
                stem: f.stem.clone(),
                detail: format!("rgb is {h}x{w}, {what} is {}x{}", t.h(), t.w()),
            });
        }
    }
    SamplePair::new(f.stem.clone(), rgb, depth, gt)
}

/// Loads `<root>/{rgb,depth,gt}/<stem>.*` into samples at native resolution,
/// ordered by stem. A directory without those subdirectories yields nothing.
pub fn load_dataset(root: &Path) -> Result<Vec<SamplePair>> {
    let stems = list_stems(root, true)?;
    par::map_slice(&stems, load_stem).into_iter().collect()
}

/// Loads a dataset and resizes every sample to `size`×`size`.
pub fn load_dataset_resized(root: &Path, size: usize) -> Result<Vec<SamplePair>> {
    check_input_size(size, size)?;
    let stems = list_stems(root, true)?;
    par::map_slice(&stems, |f| load_stem(f).map(|s| s.resized(size)))
        .into_iter()
        .collect()
}

/// Loads one prediction input (RGB + depth) resized to `size`.
pub fn load_input(files: &StemFiles, size: usize) -> Result<(Tensor, Tensor)> {
    let rgb = read_rgb(&files.rgb)?;
    let depth = read_gray(&files.depth)?;
    if rgb.spatial() != depth.spatial() {
        return Err(Error::StemSizeMismatch {
            stem: files.stem.clone(),
            detail: format!("rgb is {:?}, depth is {:?}", rgb.spatial(), depth.spatial()),
        });
    }
    Ok((resize_bilinear(&rgb, size, size), resize_bilinear(&depth, size, size)))
}

/// Quantises a value in [0, 1] to 8 bits.
pub fn to_u8(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

pub fn to_rgb_image(t: &Tensor) -> image::RgbImage {
    let [_, _, h, w] = t.shape();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb([0, 1, 2].map(|c| to_u8(t.at([0, c, y as usize, x as usize]))))
    })
}

pub fn to_gray_image(t: &Tensor) -> image::GrayImage {
    let [_, _, h, w] = t.shape();
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_u8(t.at([0, 0, y as usize, x as usize]))]))
}
