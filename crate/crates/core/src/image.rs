//! Image and partition containers, file IO, contour overlays and CIELAB lifting.
//!
//! Intensities live on the 0–255 real scale regardless of the source bit depth.
//! Noise variances and every default parameter in this crate are stated
//! against that scale.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use image::{DynamicImage, GrayImage, ImageReader, RgbImage};

use crate::error::{Result, SegError};
use crate::field::Field;

/// An H×W image with 1, 3 or 6 channels stored channel-planar.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageField {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageField {
    /// Builds an image from channel-planar data (`channel * H * W + row * W + col`).
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(SegError::Contract(format!(
                "image must be non-empty, got {height}x{width}"
            )));
        }
        if !matches!(channels, 1 | 3 | 6) {
            return Err(SegError::Contract(format!(
                "channel count must be 1, 3 or 6, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(SegError::Contract(format!(
                "expected {} samples for {height}x{width}x{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(SegError::Contract(format!(
                "non-finite intensity at sample {bad}"
            )));
        }
        Ok(ImageField {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_channels(planes: &[Field]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| SegError::Contract("no channels given".into()))?;
        let (h, w) = first.shape();
        if planes.iter().any(|p| p.shape() != (h, w)) {
            return Err(SegError::Contract("channel planes differ in shape".into()));
        }
        let data = planes.iter().flat_map(|p| p.as_slice().iter().copied()).collect();
        ImageField::new(h, w, planes.len(), data)
    }

    pub fn gray(field: &Field) -> Result<Self> {
        ImageField::from_channels(std::slice::from_ref(field))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_field(&self, c: usize) -> Field {
        Field::from_vec(self.height, self.width, self.channel(c).to_vec())
    }

    pub fn value(&self, row: usize, col: usize, c: usize) -> f64 {
        self.data[c * self.pixels() + row * self.width + col]
    }

    /// Channel vector of the pixel at flat index `idx`.
    pub fn pixel(&self, idx: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.channel(c)[idx]).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Per-channel mean over the whole image.
    pub fn channel_means(&self) -> Vec<f64> {
        (0..self.channels)
            .map(|c| self.channel(c).iter().sum::<f64>() / self.pixels() as f64)
            .collect()
    }
}

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

/// Dense label map: exactly one phase per pixel.
///
/// Each constructed partition carries a generation id. Model parameters record
/// the generation they were fitted to so stale parameters are detectable.
#[derive(Clone, Debug)]
pub struct Partition {
    height: usize,
    width: usize,
    phases: usize,
    labels: Vec<u8>,
    generation: u64,
}

impl PartialEq for Partition {
    fn eq(&self, other: &Self) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.phases == other.phases
            && self.labels == other.labels
    }
}

impl Eq for Partition {}

impl Partition {
    pub fn new(height: usize, width: usize, phases: usize, labels: Vec<u8>) -> Result<Self> {
        if !(2..=256).contains(&phases) {
            return Err(SegError::Contract(format!(
                "phase count must be in [2, 256], got {phases}"
            )));
        }
        if labels.len() != height * width {
            return Err(SegError::Contract(format!(
                "expected {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= phases) {
            return Err(SegError::Contract(format!(
                "label {bad} out of range for {phases} phases"
            )));
        }
        Ok(Partition {
            height,
            width,
            phases,
            labels,
            generation: NEXT_GENERATION.fetch_add(1, Ordering::Relaxed),
        })
    }

    pub fn uniform(height: usize, width: usize, phases: usize, label: u8) -> Result<Self> {
        Partition::new(height, width, phases, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn phases(&self) -> usize {
        self.phases
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Characteristic function of `phase` as a 0/1 field.
    pub fn indicator(&self, phase: usize) -> Field {
        Field::from_vec(
            self.height,
            self.width,
            self.labels
                .iter()
                .map(|&l| if l as usize == phase { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    pub fn phase_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.phases];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    /// Number of pixels whose label differs from `other`.
    pub fn count_changed(&self, other: &Partition) -> usize {
        self.labels
            .iter()
            .zip(&other.labels)
            .filter(|(a, b)| a != b)
            .count()
    }

    /// Applies `perm[old] = new` to every label.
    pub fn relabel(&self, perm: &[u8]) -> Result<Partition> {
        if perm.len() != self.phases {
            return Err(SegError::Contract("permutation length != phases".into()));
        }
        Partition::new(
            self.height,
            self.width,
            self.phases,
            self.labels.iter().map(|&l| perm[l as usize]).collect(),
        )
    }
}

fn is_pnm(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("pgm" | "ppm" | "pnm" | "pbm")
    )
}

fn map_image_error(path: &Path, err: image::ImageError) -> SegError {
    match err {
        image::ImageError::IoError(e) => SegError::io(path, e),
        other => SegError::format(path, other.to_string()),
    }
}

/// Reads a PNG, PGM or PPM file onto the 0–255 scale.
///
/// 8-bit samples keep their value; 16-bit samples are scaled by 255/65535.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageField> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| SegError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| SegError::io(path, e))?;
    match reader.format() {
        Some(image::ImageFormat::Png | image::ImageFormat::Pnm) => {}
        Some(other) => {
            return Err(SegError::format(path, format!("unsupported format {other:?}")))
        }
        None => return Err(SegError::format(path, "unrecognized image format")),
    }
    // Decoding failures after a successful open (including early EOF) are format errors.
    let decoded = reader
        .decode()
        .map_err(|e| SegError::format(path, e.to_string()))?;
    dynamic_to_field(path, decoded)
}

fn dynamic_to_field(path: &Path, img: DynamicImage) -> Result<ImageField> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = w * h;
    let (channels, data) = match img {
        DynamicImage::ImageLuma8(buf) => (1, buf.into_raw().into_iter().map(f64::from).collect()),
        DynamicImage::ImageLuma16(buf) => (
            1,
            buf.into_raw()
                .into_iter()
                .map(|v| f64::from(v) * 255.0 / 65535.0)
                .collect(),
        ),
        DynamicImage::ImageRgb8(buf) => (3, planar(buf.into_raw().into_iter().map(f64::from), n)),
        DynamicImage::ImageRgb16(buf) => (
            3,
            planar(
                buf.into_raw()
                    .into_iter()
                    .map(|v| f64::from(v) * 255.0 / 65535.0),
                n,
            ),
        ),
        DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgba8(_)
        | DynamicImage::ImageRgba16(_) => {
            return Err(SegError::format(path, "alpha channels are not supported"))
        }
        other => {
            return Err(SegError::format(
                path,
                format!("unsupported pixel layout {:?}", other.color()),
            ))
        }
    };
    ImageField::new(h, w, channels, data)
}

/// Interleaved RGB samples to channel-planar order.
fn planar(samples: impl Iterator<Item = f64>, pixels: usize) -> Vec<f64> {
    let mut out = vec![0.0; pixels * 3];
    for (i, v) in samples.enumerate() {
        out[(i % 3) * pixels + i / 3] = v;
    }
    out
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Writes a 1- or 3-channel image as 8-bit PNG (or PGM/PPM by extension).
/// Six-channel images are written using their first three channels.
pub fn save_image(img: &ImageField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let dynimg = if img.channels() == 1 {
        let raw = img.channel(0).iter().map(|&v| to_u8(v)).collect();
        DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, raw).expect("buffer sized to image"))
    } else {
        let mut raw = Vec::with_capacity(img.pixels() * 3);
        for i in 0..img.pixels() {
            for c in 0..3 {
                raw.push(to_u8(img.channel(c)[i]));
            }
        }
        DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, raw).expect("buffer sized to image"))
    };
    write_dynamic(&dynimg, path)
}

fn write_dynamic(img: &DynamicImage, path: &Path) -> Result<()> {
    let format = if is_pnm(path) {
        image::ImageFormat::Pnm
    } else {
        image::ImageFormat::Png
    };
    img.save_with_format(path, format)
        .map_err(|e| map_image_error(path, e))
}

/// Gray level used for `phase` when writing an `phases`-phase label image.
pub fn label_gray(phase: usize, phases: usize) -> u8 {
    (255 * phase / (phases - 1)) as u8
}

/// Path of the `phase<TAB>gray` sidecar written next to a label image.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(".phases.txt");
    path.with_file_name(name)
}

/// Writes labels as an 8-bit gray image plus a `phase<TAB>gray` sidecar file.
pub fn save_labels(part: &Partition, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let n = part.phases();
    let lut: Vec<u8> = (0..n).map(|i| label_gray(i, n)).collect();
    let raw = part.labels().iter().map(|&l| lut[l as usize]).collect();
    let img = GrayImage::from_raw(part.width() as u32, part.height() as u32, raw)
        .expect("buffer sized to partition");
    write_dynamic(&DynamicImage::ImageLuma8(img), path)?;

    let sidecar = sidecar_path(path);
    let mut file = fs::File::create(&sidecar).map_err(|e| SegError::io(&sidecar, e))?;
    for (i, g) in lut.iter().enumerate() {
        writeln!(file, "{i}\t{g}").map_err(|e| SegError::io(&sidecar, e))?;
    }
    Ok(())
}

/// Reads a label image written by [`save_labels`] back into a partition.
///
/// Gray levels must match the `floor(255·i/(n−1))` table exactly.
pub fn load_labels(path: impl AsRef<Path>, phases: usize) -> Result<Partition> {
    let path = path.as_ref();
    if !(2..=256).contains(&phases) {
        return Err(SegError::Contract(format!(
            "phase count must be in [2, 256], got {phases}"
        )));
    }
    let img = load_image(path)?;
    if img.channels() != 1 {
        return Err(SegError::format(path, "label image must be grayscale"));
    }
    let mut inverse = [None::<u8>; 256];
    for i in 0..phases {
        inverse[label_gray(i, phases) as usize] = Some(i as u8);
    }
    let labels = img
        .channel(0)
        .iter()
        .map(|&v| {
            inverse[v as usize].ok_or_else(|| {
                SegError::format(path, format!("gray level {v} is not a label of {phases} phases"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Partition::new(img.height(), img.width(), phases, labels)
}

/// Paints every pixel whose in-bounds 4-neighborhood holds another label.
pub fn overlay_contours(img: &ImageField, part: &Partition, color: [u8; 3]) -> Result<ImageField> {
    if img.shape() != part.shape() {
        return Err(SegError::Contract(format!(
            "image is {:?} but partition is {:?}",
            img.shape(),
            part.shape()
        )));
    }
    let (h, w) = img.shape();
    let n = h * w;
    let mut data = Vec::with_capacity(3 * n);
    for c in 0..3 {
        let src = if img.channels() == 1 { 0 } else { c };
        data.extend_from_slice(img.channel(src));
    }
    for row in 0..h {
        for col in 0..w {
            if is_boundary(part, row, col) {
                let idx = row * w + col;
                for c in 0..3 {
                    data[c * n + idx] = f64::from(color[c]);
                }
            }
        }
    }
    ImageField::new(h, w, 3, data)
}

pub(crate) fn is_boundary(part: &Partition, row: usize, col: usize) -> bool {
    let (h, w) = part.shape();
    let here = part.label(row, col);
    (row > 0 && part.label(row - 1, col) != here)
        || (row + 1 < h && part.label(row + 1, col) != here)
        || (col > 0 && part.label(row, col - 1) != here)
        || (col + 1 < w && part.label(row, col + 1) != here)
}

// sRGB primaries, D65 white.
const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

fn srgb_decode(v: f64) -> f64 {
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// Converts an sRGB triple on the 0–255 scale to CIELAB (L* in [0,100]).
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(|v| srgb_decode((v / 255.0).clamp(0.0, 1.0)));
    let xyz: [f64; 3] =
        std::array::from_fn(|r| (0..3).map(|k| SRGB_TO_XYZ[r][k] * lin[k]).sum());
    // White point from the same matrix so neutral grays land on a* = b* = 0.
    let white: [f64; 3] = std::array::from_fn(|r| SRGB_TO_XYZ[r].iter().sum());
    let fx = lab_f(xyz[0] / white[0]);
    let fy = lab_f(xyz[1] / white[1]);
    let fz = lab_f(xyz[2] / white[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Appends rescaled CIELAB channels to an RGB image.
///
/// L* maps [0,100] to [0,255]; a* and b* map [−128,127] to [0,255].
pub fn lift_dimensions(img: &ImageField) -> Result<ImageField> {
    if img.channels() != 3 {
        return Err(SegError::Contract(format!(
            "dimension lifting needs an RGB image, got {} channels",
            img.channels()
        )));
    }
    let n = img.pixels();
    let mut data = Vec::with_capacity(6 * n);
    data.extend_from_slice(img.as_slice());
    data.resize(6 * n, 0.0);
    for i in 0..n {
        let lab = srgb_to_lab([img.channel(0)[i], img.channel(1)[i], img.channel(2)[i]]);
        data[3 * n + i] = lab[0] * 255.0 / 100.0;
        data[4 * n + i] = lab[1] + 128.0;
        data[5 * n + i] = lab[2] + 128.0;
    }
    ImageField::new(img.height(), img.width(), 6, data)
}
