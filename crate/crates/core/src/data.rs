//! Corpus loading, image decoding, the synthetic upsampling-artifact
//! generator and mean-spectrum analysis.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use image::{ImageFormat, ImageReader, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::io::write_real;
use crate::tensor::{fft2_centered, Tensor};
use crate::train::Dataset;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const REAL_SOURCE: &str = "synthetic-real";
pub const FAKE_SOURCE: &str = "nn-upsample";
/// Luma weights for R, G, B.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
/// Range of the blur width drawn per synthetic image, in pixels.
pub const BLUR_SIGMA: (f64, f64) = (2.0, 3.0);
/// Smallest luma contrast between the two palette colours.
pub const MIN_CONTRAST: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    /// Path relative to the corpus root.
    pub path: PathBuf,
    pub label: usize,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reject {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
    pub rejects: Vec<Reject>,
}

/// How a corpus is laid out on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layout {
    /// `root/real/...` and `root/fake/...`. Images nested one directory
    /// further take that directory's name as their source tag; the others
    /// take the class directory's name.
    Dirs,
    /// A `path,label,source` file; paths are relative to the file's
    /// directory.
    Manifest(PathBuf),
}

impl CorpusManifest {
    pub fn path_of(&self, r: &Record) -> PathBuf {
        self.root.join(&r.path)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn to_text(&self) -> String {
        self.records
            .iter()
            .map(|r| format!("{},{},{}\n", slash_path(&r.path), r.label, r.source))
            .collect()
    }

    /// One `path: reason` line per rejected record.
    pub fn rejects_report(&self) -> String {
        self.rejects.iter().map(|r| format!("{}: {}\n", r.path.display(), r.reason)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Decodes every record into a dataset of `size x size` images.
    pub fn load_dataset<T: Real>(&self, size: usize) -> Result<Dataset<T>> {
        let images: Vec<Tensor<T>> = self
            .records
            .par_iter()
            .map(|r| decode_image(&self.path_of(r), size))
            .collect::<Result<_>>()?;
        if images.is_empty() {
            return Err(Error::Input(format!("corpus at {} has no records", self.root.display())));
        }
        Dataset::new(
            Tensor::stack(&images)?,
            self.labels(),
            self.records.iter().map(|r| r.source.clone()).collect(),
        )
    }
}

fn slash_path(p: &Path) -> String {
    p.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

/// Checks the leading bytes of a supported image file.
fn sniff(path: &Path) -> std::result::Result<(), String> {
    let mut head = [0u8; 8];
    let mut f = fs::File::open(path).map_err(|e| e.to_string())?;
    let n = f.read(&mut head).map_err(|e| e.to_string())?;
    let head = &head[..n];
    if head.starts_with(b"\x89PNG\r\n\x1a\n") || head.starts_with(b"P6") {
        Ok(())
    } else {
        Err("not a PNG or binary PPM file".into())
    }
}

fn list_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            list_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Lists a corpus. Records come out sorted by path; files that cannot be
/// read as images are reported in `rejects` instead of failing the load.
pub fn load_corpus(root: &Path, layout: &Layout) -> Result<CorpusManifest> {
    let mut records = Vec::new();
    let mut rejects = Vec::new();
    let base = match layout {
        Layout::Dirs => {
            for (label, class) in [(0, "real"), (1, "fake")] {
                let dir = root.join(class);
                let mut files = Vec::new();
                list_files(&dir, &mut files)?;
                for path in files {
                    let rel = path.strip_prefix(root).expect("listed under root").to_path_buf();
                    let inner = path.strip_prefix(&dir).expect("listed under class dir");
                    let source = match inner.components().count() {
                        1 => class.to_string(),
                        _ => inner.components().next().unwrap().as_os_str().to_string_lossy().into_owned(),
                    };
                    match sniff(&path) {
                        Ok(()) => records.push(Record { path: rel, label, source }),
                        Err(reason) => rejects.push(Reject { path: rel, reason }),
                    }
                }
            }
            root.to_path_buf()
        }
        Layout::Manifest(file) => {
            let text = fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
            let base = file.parent().map(Path::to_path_buf).unwrap_or_default();
            for (no, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split(',').map(str::trim).collect();
                let parsed = match fields.as_slice() {
                    [p, l, s] => match l.parse::<usize>() {
                        Ok(label) if label <= 1 => Ok((PathBuf::from(p), label, s.to_string())),
                        _ => Err((PathBuf::from(p), format!("line {}: label {l:?} is not 0 or 1", no + 1))),
                    },
                    _ => Err((PathBuf::from(line), format!("line {}: expected path,label,source", no + 1))),
                };
                match parsed {
                    Ok((path, label, source)) => match sniff(&base.join(&path)) {
                        Ok(()) => records.push(Record { path, label, source }),
                        Err(reason) => rejects.push(Reject { path, reason }),
                    },
                    Err((path, reason)) => rejects.push(Reject { path, reason }),
                }
            }
            base
        }
    };
    records.sort_by(|a, b| a.path.cmp(&b.path));
    rejects.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(CorpusManifest { root: base, records, rejects })
}

/// Bilinear sample with half-pixel centres and edge clamping, mapping an
/// axis of length `from` onto length `to`.
fn source_coord(dst: usize, from: usize, to: usize) -> (usize, usize, f64) {
    let x = ((dst as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
    let i0 = x.floor() as usize;
    let i1 = (i0 + 1).min(from - 1);
    (i0, i1, x - i0 as f64)
}

/// Scales the shorter side to `size` (bilinear) and crops the centre.
pub fn resize_crop<T: Real>(rgb: &RgbImage, size: usize) -> Result<Tensor<T>> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == 0 || h == 0 || size == 0 {
        return Err(Error::Input(format!("cannot resize a {w} x {h} image to {size}")));
    }
    let (sh, sw) = if h <= w {
        (size, ((w * size) as f64 / h as f64).round().max(size as f64) as usize)
    } else {
        (((h * size) as f64 / w as f64).round().max(size as f64) as usize, size)
    };
    let (oy, ox) = ((sh - size) / 2, (sw - size) / 2);
    let rows: Vec<_> = (0..size).map(|r| source_coord(r + oy, h, sh)).collect();
    let cols: Vec<_> = (0..size).map(|c| source_coord(c + ox, w, sw)).collect();
    let raw = rgb.as_raw();
    let px = |y: usize, x: usize, ch: usize| raw[(y * w + x) * 3 + ch] as f64 / 255.0;
    Ok(Tensor::from_fn(&[3, size, size], |i| {
        let (ch, r, c) = (i / (size * size), (i / size) % size, i % size);
        let (y0, y1, fy) = rows[r];
        let (x0, x1, fx) = cols[c];
        let top = px(y0, x0, ch) * (1.0 - fx) + px(y0, x1, ch) * fx;
        let bottom = px(y1, x0, ch) * (1.0 - fx) + px(y1, x1, ch) * fx;
        T::of((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0))
    }))
}

/// Decodes an 8-bit PNG or binary PPM into a 3 x size x size tensor in
/// [0, 1]. Grayscale images are repeated over the three channels.
pub fn decode_image<T: Real>(path: &Path, size: usize) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let decode_err = |reason: String| Error::Decode { path: path.to_path_buf(), reason };
    let format = if bytes.starts_with(b"\x89PNG") {
        ImageFormat::Png
    } else if bytes.starts_with(b"P6") {
        ImageFormat::Pnm
    } else {
        return Err(decode_err("not a PNG or binary PPM file".into()));
    };
    let img = ImageReader::with_format(std::io::Cursor::new(bytes), format)
        .decode()
        .map_err(|e| decode_err(e.to_string()))?;
    resize_crop(&img.to_rgb8(), size)
}

/// Mixes the corpus seed, class and image index into one generator seed.
pub fn image_seed(seed: u64, label: usize, index: usize) -> u64 {
    let mut z = seed ^ ((label as u64) << 56) ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Circular Gaussian blur along both axes of a `size x size` field.
fn periodic_blur(field: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let wrap = |i: i64| i.rem_euclid(size as i64) as usize;
    let mut tmp = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            tmp[r * size + c] = (-radius..=radius)
                .map(|d| kernel[(d + radius) as usize] * field[r * size + wrap(c as i64 + d)])
                .sum::<f64>()
                / norm;
        }
    }
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            out[r * size + c] = (-radius..=radius)
                .map(|d| kernel[(d + radius) as usize] * tmp[wrap(r as i64 + d) * size + c])
                .sum::<f64>()
                / norm;
        }
    }
    out
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Smooth two-colour image in float RGB, row-major `size x size x 3`.
fn smooth_noise(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let noise: Vec<f64> = (0..size * size).map(|_| StandardNormal.sample(&mut *rng)).collect();
    let sigma = rng.random_range(BLUR_SIGMA.0..BLUR_SIGMA.1);
    let field = periodic_blur(&noise, size, sigma);
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (c0, c1) = loop {
        let c0: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>());
        let c1: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>());
        let contrast: f64 = (0..3).map(|k| LUMA[k] * (c1[k] - c0[k])).sum();
        if contrast.abs() >= MIN_CONTRAST {
            break (c0, c1);
        }
    };
    field
        .iter()
        .flat_map(|&v| {
            let t = (v - lo) / span;
            (0..3).map(move |k| c0[k] + t * (c1[k] - c0[k]))
        })
        .collect()
}

/// One synthetic image. Label 0 is a blurred-noise image with a random
/// two-colour palette; label 1 is such an image averaged over 2 x 2
/// blocks, quantized, and enlarged back by nearest neighbour.
pub fn synth_image(seed: u64, label: usize, index: usize, size: usize) -> Result<RgbImage> {
    if size < 2 || size % 2 != 0 {
        return Err(Error::Input(format!("synthetic images need an even size of at least 2, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, label, index));
    let rgb = smooth_noise(&mut rng, size);
    let s = size as u32;
    Ok(match label {
        0 => RgbImage::from_fn(s, s, |x, y| {
            let i = (y as usize * size + x as usize) * 3;
            image::Rgb([quantize(rgb[i]), quantize(rgb[i + 1]), quantize(rgb[i + 2])])
        }),
        _ => {
            let half = size / 2;
            let small: Vec<u8> = (0..half * half * 3)
                .map(|i| {
                    let (p, k) = (i / 3, i % 3);
                    let (r, c) = (2 * (p / half), 2 * (p % half));
                    let at = |rr: usize, cc: usize| rgb[(rr * size + cc) * 3 + k];
                    quantize((at(r, c) + at(r, c + 1) + at(r + 1, c) + at(r + 1, c + 1)) / 4.0)
                })
                .collect();
            RgbImage::from_fn(s, s, |x, y| {
                let p = (y as usize / 2) * half + x as usize / 2;
                image::Rgb([small[p * 3], small[p * 3 + 1], small[p * 3 + 2]])
            })
        }
    })
}

/// Writes `n_per_class` images of each class as `real/NNNNN.png` and
/// `fake/NNNNN.png`, numbered from `start`, plus a manifest.
pub fn synth_corpus(out_root: &Path, n_per_class: usize, size: usize, seed: u64, start: usize) -> Result<CorpusManifest> {
    if n_per_class == 0 {
        return Err(Error::Input("synth_corpus needs at least one image per class".into()));
    }
    let mut records = Vec::with_capacity(2 * n_per_class);
    for (label, class, source) in [(0, "real", REAL_SOURCE), (1, "fake", FAKE_SOURCE)] {
        let dir = out_root.join(class);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let written: Vec<Record> = (start..start + n_per_class)
            .into_par_iter()
            .map(|index| {
                let name = format!("{index:05}.png");
                let path = dir.join(&name);
                synth_image(seed, label, index, size)?
                    .save_with_format(&path, ImageFormat::Png)
                    .map_err(|e| match e {
                        image::ImageError::IoError(io) => Error::io(&path, io),
                        other => Error::Decode { path: path.clone(), reason: other.to_string() },
                    })?;
                Ok(Record { path: PathBuf::from(class).join(name), label, source: source.to_string() })
            })
            .collect::<Result<_>>()?;
        records.extend(written);
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = CorpusManifest { root: out_root.to_path_buf(), records, rejects: Vec::new() };
    manifest.save(&out_root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Mean over channels with the luma weights; `3 x h x w` to `h x w`.
pub fn luma<T: Real>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("luma needs 3 x H x W, got {s:?}")));
    }
    let plane = s[1] * s[2];
    let d = img.data();
    Ok(Tensor::from_fn(&s[1..], |i| {
        T::of(LUMA[0]) * d[i] + T::of(LUMA[1]) * d[plane + i] + T::of(LUMA[2]) * d[2 * plane + i]
    }))
}

/// `log(1 + |F|)` of the luma of one image, with F the centered 2-D DFT.
pub fn log_spectrum(img: &Tensor<f64>) -> Result<Tensor<f64>> {
    let spec = fft2_centered(&luma(img)?)?;
    Ok(spec.magnitude().map(f64::ln_1p))
}

/// Mean log-magnitude spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumImage {
    pub values: Tensor<f64>,
    pub count: usize,
}

const REDUCE_CHUNK: usize = 16;

/// Sums equally shaped tensors in a fixed order: fixed-size chunks summed
/// left to right, then pairwise across chunks.
fn tree_sum(items: Vec<Tensor<f64>>) -> Tensor<f64> {
    let mut level: Vec<Tensor<f64>> = items
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut acc = chunk[0].clone();
            for t in &chunk[1..] {
                acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, &b)| *a += b);
            }
            acc
        })
        .collect();
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|pair| match pair {
                [a, b] => a.zip_map(b, |x, y| x + y).expect("equal shapes"),
                [a] => a.clone(),
                _ => unreachable!(),
            })
            .collect();
    }
    level.pop().expect("non-empty")
}

/// Averages log spectra of images already decoded to 3 x S x S.
pub fn mean_spectrum_of(images: &[Tensor<f64>]) -> Result<SpectrumImage> {
    if images.is_empty() {
        return Err(Error::Input("mean spectrum of no images".into()));
    }
    let spectra: Vec<Tensor<f64>> = images.par_iter().map(log_spectrum).collect::<Result<_>>()?;
    let count = spectra.len();
    let sum = tree_sum(spectra);
    Ok(SpectrumImage { values: sum.scale(1.0 / count as f64), count })
}

/// Mean log spectrum of up to `n` records of `manifest`, taken in path
/// order. `count` in the result tells how many were used.
pub fn mean_spectrum(manifest: &CorpusManifest, records: &[Record], n: usize, size: usize) -> Result<SpectrumImage> {
    let mut chosen: Vec<&Record> = records.iter().collect();
    chosen.sort_by(|a, b| a.path.cmp(&b.path));
    chosen.truncate(n);
    let images: Vec<Tensor<f64>> = chosen
        .par_iter()
        .map(|r| decode_image(&manifest.path_of(r), size))
        .collect::<Result<_>>()?;
    mean_spectrum_of(&images)
}

impl SpectrumImage {
    /// Min-max normalized 8-bit preview; a constant spectrum renders black.
    pub fn preview(&self) -> image::GrayImage {
        let (h, w) = (self.values.shape()[0], self.values.shape()[1]);
        let d = self.values.data();
        let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            let v = d[y as usize * w + x as usize];
            image::Luma([if hi > lo { quantize((v - lo) / (hi - lo)) } else { 0 }])
        })
    }

    /// Writes `<stem>.fqt` and `<stem>.png`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let tensor = stem.with_extension("fqt");
        write_real(&tensor, &self.values)?;
        let png = stem.with_extension("png");
        save_png(&png, &self.preview())
    }

    /// Value at `(r, c)` over the mean of the 5 x 5 neighbourhood centred
    /// on it (wrapping around the edges, centre included).
    pub fn peak_ratio(&self, r: usize, c: usize) -> f64 {
        let (h, w) = (self.values.shape()[0], self.values.shape()[1]);
        let d = self.values.data();
        let mut sum = 0.0;
        for dr in -2i64..=2 {
            for dc in -2i64..=2 {
                let rr = (r as i64 + dr).rem_euclid(h as i64) as usize;
                let cc = (c as i64 + dc).rem_euclid(w as i64) as usize;
                sum += d[rr * w + cc];
            }
        }
        d[r * w + c] / (sum / 25.0)
    }
}

pub fn save_png(path: &Path, img: &image::GrayImage) -> Result<()> {
    img.save_with_format(path, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode { path: path.to_path_buf(), reason: other.to_string() },
    })
}

/// Distance in bins from the spectrum edge at which nearest-neighbour
/// replicas of the blurred content peak for a `size`-pixel image: the
/// maximizer over `d` of `sin(pi d / size) * exp(-2 pi^2 s^2 d^2 / size^2)`,
/// the 2-tap box response times the Gaussian transfer at the mean blur
/// width `s`.
pub fn replica_offset(size: usize) -> usize {
    let sigma = (BLUR_SIGMA.0 + BLUR_SIGMA.1) / 2.0;
    let n = size as f64;
    let pi = std::f64::consts::PI;
    let envelope = |d: usize| {
        let d = d as f64;
        (pi * d / n).sin() * (-2.0 * pi * pi * sigma * sigma * d * d / (n * n)).exp()
    };
    (1..size / 2).max_by(|&a, &b| envelope(a).total_cmp(&envelope(b))).unwrap_or(1)
}

/// Centered spectrum positions of the replica peaks: the offset bins next
/// to the four corners and the four edge midpoints.
pub fn replica_positions(size: usize) -> Vec<(usize, usize)> {
    let d = replica_offset(size);
    let axis = [d, size / 2, size - d];
    let mut out = Vec::new();
    for &r in &axis {
        for &c in &axis {
            if (r, c) != (size / 2, size / 2) {
                out.push((r, c));
            }
        }
    }
    out
}
