//! Image/mask corpora on disk, a synthetic forgery generator and training
//! augmentation.
//!
//! Layout: `root/images/<id>.<ext>` with a mask at `root/masks/<id>.<ext>`
//! (also accepted: `<id>_gt.<ext>`, `<id>_mask.<ext>`). An optional
//! `root/manifest.tsv` lists `id<TAB>split` lines; without it every seventh
//! sample (by sorted id) is held out for testing. Masks are 0 for authentic
//! and 255 for manipulated pixels; values of 128 and above count as
//! manipulated.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::INPUT_MULTIPLE;
use crate::error::{Error, Result};
use crate::loss::Mask;
use crate::tensor::Tensor;

pub const MASK_THRESHOLD: u8 = 128;
pub const MANIFEST_FILE: &str = "manifest.tsv";
const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "tif", "tiff", "bmp"];
const MASK_SUFFIXES: [&str; 3] = ["", "_gt", "_mask"];
/// Default hold-out: one sample in `TEST_PERIOD` goes to the test split.
const TEST_PERIOD: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Which entries of a manifest to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitSelection {
    Only(Split),
    All,
}

impl FromStr for SplitSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(SplitSelection::All),
            other => other.parse().map(SplitSelection::Only).map_err(|_| {
                Error::Config(format!("split must be train, test or all, got `{other}`"))
            }),
        }
    }
}

impl fmt::Display for SplitSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitSelection::All => f.write_str("all"),
            SplitSelection::Only(s) => s.fmt(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn select(&self, which: SplitSelection) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| which == SplitSelection::All || which == SplitSelection::Only(e.split))
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if path.is_file() && ext_ok {
            out.push(path);
        }
    }
    Ok(out)
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn read_split_file(path: &Path) -> Result<BTreeMap<String, Split>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, split) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!(
                "{}:{}: expected `id<TAB>split`",
                path.display(),
                n + 1
            ))
        })?;
        let split: Split = split.trim().parse().map_err(|_| {
            Error::Data(format!(
                "{}:{}: unknown split `{split}`",
                path.display(),
                n + 1
            ))
        })?;
        if out.insert(id.to_string(), split).is_some() {
            return Err(Error::Data(format!(
                "{}: id `{id}` listed twice",
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Pairs images with masks and assigns splits; entries are sorted by id.
pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let images = list_dir(&root.join("images"))?;
    let masks_dir = root.join("masks");
    let masks = list_dir(&masks_dir)?;

    let mut by_stem: BTreeMap<String, PathBuf> = BTreeMap::new();
    for path in images {
        let stem = stem_of(&path);
        if let Some(prev) = by_stem.insert(stem.clone(), path.clone()) {
            return Err(Error::Data(format!(
                "duplicate image stem `{stem}`: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    if by_stem.is_empty() {
        return Err(Error::Data(format!(
            "no images under {}",
            root.join("images").display()
        )));
    }
    let mask_stems: BTreeMap<String, PathBuf> =
        masks.into_iter().map(|p| (stem_of(&p), p)).collect();

    let splits = if root.join(MANIFEST_FILE).is_file() {
        Some(read_split_file(&root.join(MANIFEST_FILE))?)
    } else {
        None
    };

    let mut missing = Vec::new();
    let mut entries = Vec::new();
    for (idx, (id, image)) in by_stem.into_iter().enumerate() {
        let mask = MASK_SUFFIXES
            .iter()
            .find_map(|suffix| mask_stems.get(&format!("{id}{suffix}")).cloned());
        let Some(mask) = mask else {
            missing.push(id);
            continue;
        };
        let split = match &splits {
            Some(map) => match map.get(&id) {
                Some(s) => *s,
                None => continue,
            },
            None if idx % TEST_PERIOD == TEST_PERIOD - 1 => Split::Test,
            None => Split::Train,
        };
        entries.push(ManifestEntry {
            id,
            image,
            mask,
            split,
        });
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "no mask in {} for: {}",
            masks_dir.display(),
            missing.join(", ")
        )));
    }
    if let Some(map) = &splits {
        let known: BTreeSet<&str> = entries.iter().map(|e| e.id.as_str()).collect();
        let unknown: Vec<&str> = map
            .keys()
            .map(String::as_str)
            .filter(|id| !known.contains(id))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Data(format!(
                "{MANIFEST_FILE} lists ids without an image: {}",
                unknown.join(", ")
            )));
        }
    }
    if entries.is_empty() {
        return Err(Error::Data(format!(
            "manifest under {} is empty",
            root.display()
        )));
    }
    Ok(Manifest {
        root: root.to_path_buf(),
        entries,
    })
}

/// An RGB image in `[0, 1]` with its binary mask.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Mask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Mask) -> Result<Self> {
        let (h, w, c) = image.dims3()?;
        if c != 3 || (h, w) != (mask.height(), mask.width()) {
            return Err(Error::Shape(format!(
                "image {:?} and mask {}x{} disagree",
                image.shape(),
                mask.height(),
                mask.width()
            )));
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Tensor::new(
        [h as usize, w as usize, 3],
        img.into_raw()
            .into_iter()
            .map(|b| b as f32 / 255.0)
            .collect(),
    )
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Mask::new(
        h as usize,
        w as usize,
        img.into_raw()
            .into_iter()
            .map(|b| u8::from(b >= MASK_THRESHOLD))
            .collect(),
    )
}

/// Single-channel map scaled to `[0, 1]`, shaped `[h, w, 1]`.
pub fn read_gray(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Tensor::new(
        [h as usize, w as usize, 1],
        img.into_raw()
            .into_iter()
            .map(|b| b as f32 / 255.0)
            .collect(),
    )
}

pub fn load_sample(entry: &ManifestEntry) -> Result<Sample> {
    let image = read_rgb(&entry.image)?;
    let mask = read_mask(&entry.mask)?;
    Sample::new(entry.id.clone(), image, mask)
        .map_err(|e| Error::Data(format!("{}: {e}", entry.id)))
}

fn save<P: image::Pixel<Subpixel = u8> + image::PixelWithColorType>(
    img: &ImageBuffer<P, Vec<u8>>,
    path: &Path,
) -> Result<()>
where
    [P::Subpixel]: image::EncodableLayout,
{
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (h, w, c) = image.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!(
            "expected RGB, got {:?}",
            image.shape()
        )));
    }
    let buf = RgbImage::from_raw(
        w as u32,
        h as u32,
        image.data().iter().map(|&v| to_byte(v)).collect(),
    )
    .expect("buffer sized from shape");
    save(&buf, path)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let buf = GrayImage::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.bits().iter().map(|&b| b * 255).collect(),
    )
    .expect("buffer sized from shape");
    save(&buf, path)
}

/// Writes a single-channel map in `[0, 1]` as 8-bit grey.
pub fn write_gray(path: &Path, map: &Tensor<f32>) -> Result<()> {
    let (h, w) = match map.shape() {
        [h, w] | [h, w, 1] => (*h, *w),
        s => return Err(Error::Shape(format!("expected one channel, got {s:?}"))),
    };
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = GrayImage::from_raw(
        w as u32,
        h as u32,
        map.data().iter().map(|&v| to_byte(v)).collect(),
    )
    .expect("buffer sized from shape");
    save(&buf, path)
}

/// Input and prediction side by side; the right panel tints predicted
/// pixels red and draws the predicted boundary in yellow.
pub fn overlay(image: &Tensor<f32>, pred: &Mask) -> Result<Tensor<f32>> {
    let (h, w, _) = image.dims3()?;
    if (h, w) != (pred.height(), pred.width()) {
        return Err(Error::Shape(
            "overlay mask extent differs from image".into(),
        ));
    }
    let edge = if pred.height() > 0 && pred.width() > 0 {
        let inner = pred.erode(1);
        Mask::new(
            h,
            w,
            pred.bits()
                .iter()
                .zip(inner.bits())
                .map(|(a, b)| a & !b & 1)
                .collect(),
        )?
    } else {
        pred.clone()
    };
    let mut buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::new(2 * w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [image.at3(y, x, 0), image.at3(y, x, 1), image.at3(y, x, 2)];
            buf.put_pixel(x as u32, y as u32, Rgb(px));
            let tinted = if edge.get(y, x) {
                [1.0, 1.0, 0.0]
            } else if pred.get(y, x) {
                [0.5 * px[0] + 0.5, 0.5 * px[1], 0.5 * px[2]]
            } else {
                px
            };
            buf.put_pixel((w + x) as u32, y as u32, Rgb(tinted));
        }
    }
    Tensor::new([h, 2 * w, 3], buf.into_raw())
}

/// Pads bottom-right with zeros up to the next multiple of the pyramid
/// stride; returns the padded sample and the original extent.
pub fn pad_to_multiple(sample: &Sample) -> Result<(Sample, (usize, usize))> {
    let (h, w) = (sample.height(), sample.width());
    let ph = h.div_ceil(INPUT_MULTIPLE).max(1) * INPUT_MULTIPLE;
    let pw = w.div_ceil(INPUT_MULTIPLE).max(1) * INPUT_MULTIPLE;
    if (ph, pw) == (h, w) {
        return Ok((sample.clone(), (h, w)));
    }
    let image = Tensor::from_fn([ph, pw, 3], |i| {
        let (y, x, c) = (i / (pw * 3), (i / 3) % pw, i % 3);
        if y < h && x < w {
            sample.image.at3(y, x, c)
        } else {
            0.0
        }
    });
    let bits = (0..ph * pw)
        .map(|i| {
            let (y, x) = (i / pw, i % pw);
            u8::from(y < h && x < w && sample.mask.get(y, x))
        })
        .collect();
    Ok((
        Sample::new(sample.id.clone(), image, Mask::new(ph, pw, bits)?)?,
        (h, w),
    ))
}

pub fn flip_image(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, w, c) = image.dims3()?;
    Ok(Tensor::from_fn(image.shape().to_vec(), |i| {
        let (row, x, ch) = (i / (w * c), (i / c) % w, i % c);
        image.data()[(row * w + (w - 1 - x)) * c + ch]
    }))
}

pub const MAX_BRIGHTNESS_JITTER: f32 = 0.1;

/// Random horizontal flip (applied to image and mask together) and a
/// brightness offset in `[-0.1, 0.1]`, clamped to `[0, 1]`.
pub fn augment(sample: &Sample, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = rng.gen_bool(0.5);
    let delta = rng.gen_range(-MAX_BRIGHTNESS_JITTER..=MAX_BRIGHTNESS_JITTER);
    let (image, mask) = if flip {
        (flip_image(&sample.image)?, sample.mask.flip_horizontal())
    } else {
        (sample.image.clone(), sample.mask.clone())
    };
    let image = image.map(|v| (v + delta).clamp(0.0, 1.0));
    Sample::new(sample.id.clone(), image, mask)
}

/// Parameters of the synthetic corpus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

struct Wave {
    fx: f32,
    fy: f32,
    phase: f32,
    amp: [f32; 3],
}

fn smooth_field(rng: &mut ChaCha8Rng, size: usize) -> (Vec<Wave>, [f32; 3]) {
    let base = [
        rng.gen_range(0.25..0.75),
        rng.gen_range(0.25..0.75),
        rng.gen_range(0.25..0.75),
    ];
    let waves = (0..4)
        .map(|_| Wave {
            fx: rng.gen_range(0.5..3.0) * std::f32::consts::TAU / size as f32,
            fy: rng.gen_range(0.5..3.0) * std::f32::consts::TAU / size as f32,
            phase: rng.gen_range(0.0..std::f32::consts::TAU),
            amp: [
                rng.gen_range(0.0..0.08),
                rng.gen_range(0.0..0.08),
                rng.gen_range(0.0..0.08),
            ],
        })
        .collect();
    (waves, base)
}

fn field_at(waves: &[Wave], base: [f32; 3], y: usize, x: usize, c: usize) -> f32 {
    waves.iter().fold(base[c], |acc, wv| {
        acc + wv.amp[c] * (wv.fx * x as f32 + wv.fy * y as f32 + wv.phase).sin()
    })
}

enum Shape {
    Ellipse {
        cy: f32,
        cx: f32,
        ry: f32,
        rx: f32,
        angle: f32,
    },
    Polygon(Vec<(f32, f32)>),
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let s = size as f32;
        let cy = rng.gen_range(0.2 * s..0.8 * s);
        let cx = rng.gen_range(0.2 * s..0.8 * s);
        if rng.gen_bool(0.5) {
            Shape::Ellipse {
                cy,
                cx,
                ry: rng.gen_range(0.06 * s..0.2 * s),
                rx: rng.gen_range(0.06 * s..0.2 * s),
                angle: rng.gen_range(0.0..std::f32::consts::PI),
            }
        } else {
            let n = rng.gen_range(3..=6);
            let mut angles: Vec<f32> = (0..n)
                .map(|_| rng.gen_range(0.0..std::f32::consts::TAU))
                .collect();
            angles.sort_by(f32::total_cmp);
            let verts = angles
                .into_iter()
                .map(|a| {
                    let r = rng.gen_range(0.08 * s..0.2 * s);
                    (cy + r * a.sin(), cx + r * a.cos())
                })
                .collect();
            Shape::Polygon(verts)
        }
    }

    fn contains(&self, y: f32, x: f32) -> bool {
        match self {
            Shape::Ellipse {
                cy,
                cx,
                ry,
                rx,
                angle,
            } => {
                let (dy, dx) = (y - cy, x - cx);
                let (s, c) = angle.sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon(verts) => {
                // even-odd rule
                let mut inside = false;
                let n = verts.len();
                for i in 0..n {
                    let (y1, x1) = verts[i];
                    let (y2, x2) = verts[(i + 1) % n];
                    if (y1 > y) != (y2 > y) && x < (x2 - x1) * (y - y1) / (y2 - y1) + x1 {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }
}

/// Generates one synthetic forgery: a smooth background with 1-3 regions
/// recoloured from a second smooth field, blended over a soft border. The
/// mask marks exactly the region interiors and covers between 0 and half of
/// the image.
pub fn synth_sample(size: usize, seed: u64, index: usize) -> Result<Sample> {
    if size == 0 || !size.is_multiple_of(INPUT_MULTIPLE) {
        return Err(Error::Config(format!(
            "synthetic size must be a positive multiple of {INPUT_MULTIPLE}, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let (bg, bg_base) = smooth_field(&mut rng, size);
    let (fg, fg_base) = smooth_field(&mut rng, size);
    // push the inserted colour away from the background
    let fg_base = [0, 1, 2].map(|c| {
        let d = fg_base[c] - bg_base[c];
        (bg_base[c] + d.signum() * d.abs().max(0.2)).clamp(0.05, 0.95)
    });
    let bits = loop {
        let n = rng.gen_range(1..=3);
        let shapes: Vec<Shape> = (0..n).map(|_| Shape::random(&mut rng, size)).collect();
        let bits: Vec<u8> = (0..size * size)
            .map(|i| {
                let (y, x) = ((i / size) as f32 + 0.5, (i % size) as f32 + 0.5);
                u8::from(shapes.iter().any(|s| s.contains(y, x)))
            })
            .collect();
        let covered = bits.iter().filter(|&&b| b == 1).count();
        if covered > 0 && 2 * covered < size * size {
            break bits;
        }
    };
    let mask = Mask::new(size, size, bits)?;
    // Soft border: blend weight is the fraction of the 3x3 neighbourhood
    // inside the region.
    let noise_seed: u64 = rng.gen();
    let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
    let image = Tensor::from_fn([size, size, 3], |i| {
        let (y, x, c) = (i / (size * 3), (i / 3) % size, i % 3);
        let mut inside = 0u32;
        let mut total = 0u32;
        for yy in y.saturating_sub(1)..=(y + 1).min(size - 1) {
            for xx in x.saturating_sub(1)..=(x + 1).min(size - 1) {
                inside += mask.get(yy, xx) as u32;
                total += 1;
            }
        }
        let alpha = inside as f32 / total as f32;
        let b = field_at(&bg, bg_base, y, x, c);
        let f = field_at(&fg, fg_base, y, x, c);
        let jitter = noise.gen_range(-0.02..0.02);
        (alpha * f + (1.0 - alpha) * b + jitter).clamp(0.0, 1.0)
    });
    Sample::new(format!("synth_{index:04}"), image, mask)
}

/// Writes `count` synthetic samples under `root` in the standard layout and
/// returns their ids.
pub fn gen_synthetic(root: &Path, spec: SynthSpec) -> Result<Vec<String>> {
    if spec.count == 0 {
        return Err(Error::Config(
            "synthetic corpus needs at least one sample".into(),
        ));
    }
    let mut ids = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let s = synth_sample(spec.size, spec.seed, i)?;
        // Quantise once so the written corpus and the in-memory sample agree.
        write_rgb(&root.join("images").join(format!("{}.png", s.id)), &s.image)?;
        write_mask(&root.join("masks").join(format!("{}.png", s.id)), &s.mask)?;
        ids.push(s.id);
    }
    Ok(ids)
}
