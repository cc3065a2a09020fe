//! Synthetic blob images, PPM decoding, JSONL annotations and flips.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::GroundTruth;
use crate::codec::{BBox, Detection};
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// How many placement attempts a sample may reject before giving up on
/// further blobs.
pub const MAX_REJECTIONS: usize = 100;
/// Minimum peak brightness of a blob over its local background.
pub const MIN_CONTRAST: f64 = 0.15;

/// One image with its boxes. `image` is `(1, 3, H, W)` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub gts: Vec<GroundTruth>,
    pub id: String,
}

impl Sample {
    pub fn width(&self) -> usize {
        self.image.w()
    }

    pub fn height(&self) -> usize {
        self.image.h()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    /// Semi-axis range in pixels.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Peak-to-peak amplitude of the low-frequency background pattern.
    pub texture_amplitude: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 128,
            min_blobs: 0,
            max_blobs: 3,
            min_radius: 6.0,
            max_radius: 22.0,
            texture_amplitude: 0.12,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let limit = self.image_size as f64 / 3.0;
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size {} too small", self.image_size)));
        }
        if !(self.min_radius > 2.0 && self.min_radius <= self.max_radius && self.max_radius < limit) {
            return Err(Error::Config(format!(
                "radius range [{}, {}] must lie in (2, {limit})",
                self.min_radius, self.max_radius
            )));
        }
        if self.min_blobs > self.max_blobs {
            return Err(Error::Config("min_blobs exceeds max_blobs".into()));
        }
        if !(0.0..=0.5).contains(&self.texture_amplitude) {
            return Err(Error::Config("texture_amplitude must be in [0, 0.5]".into()));
        }
        Ok(())
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    contrast: f64,
    tint: [f64; 3],
}

impl Blob {
    fn bbox(&self) -> BBox {
        BBox::new(self.cx - self.rx, self.cy - self.ry, self.cx + self.rx, self.cy + self.ry)
    }

    /// Plateau in the middle, smooth falloff to zero at the ellipse boundary.
    fn profile(&self, x: f64, y: f64) -> f64 {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        let rho = (dx * dx + dy * dy).sqrt();
        let s = ((1.0 - rho) / 0.35).clamp(0.0, 1.0);
        self.contrast * s * s * (3.0 - 2.0 * s)
    }
}

fn boxes_overlap(a: &BBox, b: &BBox, margin: f64) -> bool {
    a.x1 < b.x2 + margin && b.x1 < a.x2 + margin && a.y1 < b.y2 + margin && b.y1 < a.y2 + margin
}

/// Deterministic sample `index` of the synthetic set described by `config`.
///
/// The generator is ChaCha8 keyed by `config.seed` with stream `index`, so
/// samples can be produced in any order or in parallel.
pub fn synth_sample(config: &SynthConfig, index: u64) -> Result<Sample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    let size = config.image_size;
    let sz = size as f64;

    // Background: a base colour plus two low-frequency waves and mild grain.
    let base = [rng.random_range(0.35..0.5), rng.random_range(0.2..0.32), rng.random_range(0.18..0.28)];
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            let fx = rng.random_range(0.5..3.0) * std::f64::consts::TAU / sz;
            let fy = rng.random_range(0.5..3.0) * std::f64::consts::TAU / sz;
            (fx, fy, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let amp = config.texture_amplitude / 4.0;

    let wanted = rng.random_range(config.min_blobs..=config.max_blobs);
    let mut blobs: Vec<Blob> = Vec::with_capacity(wanted);
    let mut rejections = 0;
    while blobs.len() < wanted && rejections < MAX_REJECTIONS {
        let r = rng.random_range(config.min_radius..=config.max_radius);
        let aspect = rng.random_range(0.7..=1.4);
        // Geometry on a 1/64 px grid keeps mirrored coordinates exact.
        let snap = |v: f64| (v * 64.0).round() / 64.0;
        let (rx, ry) = (snap(r), snap(r / aspect));
        if 2.0 * (ry + 1.0) >= sz {
            rejections += 1;
            continue;
        }
        let cx = snap(rng.random_range(rx + 1.0..=sz - rx - 1.0));
        let cy = snap(rng.random_range(ry + 1.0..=sz - ry - 1.0));
        let blob = Blob {
            cx,
            cy,
            rx,
            ry,
            contrast: rng.random_range(MIN_CONTRAST + 0.1..0.45),
            tint: [1.0, rng.random_range(0.6..0.9), rng.random_range(0.5..0.8)],
        };
        if blobs.iter().any(|b| boxes_overlap(&b.bbox(), &blob.bbox(), 2.0)) {
            rejections += 1;
            continue;
        }
        blobs.push(blob);
    }

    let mut image = Tensor::<f32>::zeros([1, 3, size, size]);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let texture: f64 = waves.iter().map(|&(fx, fy, ph)| (fx * px + fy * py + ph).sin()).sum();
            let grain = rng.random_range(-1.0..1.0) * amp * 0.5;
            let bump: f64 = blobs.iter().map(|b| b.profile(px, py)).sum();
            let tint_of = |c: usize| blobs.iter().find(|b| b.profile(px, py) > 0.0).map_or(1.0, |b| b.tint[c]);
            for (c, &b0) in base.iter().enumerate() {
                let v = b0 + amp * texture + grain + bump * tint_of(c);
                image.set(0, c, y, x, v.clamp(0.0, 1.0) as f32);
            }
        }
    }

    let gts = blobs.iter().map(|b| GroundTruth::new(b.bbox())).collect();
    Ok(Sample {
        image,
        gts,
        id: format!("synth-{}-{index:06}", config.seed),
    })
}

/// Samples `start..start + count` of the synthetic set.
pub fn synth_range(config: &SynthConfig, start: u64, count: usize) -> Result<Vec<Sample>> {
    (start..start + count as u64).map(|i| synth_sample(config, i)).collect()
}

/// Mirror left-right. Boxes map `(x1, x2) → (W − x2, W − x1)`.
pub fn flip_horizontal(sample: &Sample) -> Sample {
    let [n, c, h, w] = sample.image.shape();
    let mut image = Tensor::zeros([n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    image.set(ni, ci, y, w - 1 - x, sample.image.at(ni, ci, y, x));
                }
            }
        }
    }
    let wf = w as f64;
    let gts = sample
        .gts
        .iter()
        .map(|g| GroundTruth {
            bbox: BBox::new(wf - g.bbox.x2, g.bbox.y1, wf - g.bbox.x1, g.bbox.y2),
            class: g.class,
        })
        .collect();
    Sample { image, gts, id: sample.id.clone() }
}

/// Mirror top-bottom. Boxes map `(y1, y2) → (H − y2, H − y1)`.
pub fn flip_vertical(sample: &Sample) -> Sample {
    let [n, c, h, w] = sample.image.shape();
    let mut image = Tensor::zeros([n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                let src = sample.image.index(ni, ci, y, 0);
                let dst = image.index(ni, ci, h - 1 - y, 0);
                let row = sample.image.data()[src..src + w].to_vec();
                image.data_mut()[dst..dst + w].copy_from_slice(&row);
            }
        }
    }
    let hf = h as f64;
    let gts = sample
        .gts
        .iter()
        .map(|g| GroundTruth {
            bbox: BBox::new(g.bbox.x1, hf - g.bbox.y2, g.bbox.x2, hf - g.bbox.y1),
            class: g.class,
        })
        .collect();
    Sample { image, gts, id: sample.id.clone() }
}

// ---------------------------------------------------------------------------
// PPM

fn image_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Decode a binary (P6) PPM with maxval ≤ 255 into a `(1, 3, H, W)` tensor.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(image_err(path, "not a binary PPM (expected P6 magic)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Whitespace and `#` comments may separate header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *field = text.parse().map_err(|_| image_err(path, "malformed header"))?;
    }
    let [w, h, maxval] = fields;
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(image_err(path, "malformed header"));
    }
    pos += 1;
    if w == 0 || h == 0 {
        return Err(image_err(path, "zero-sized image"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(image_err(path, format!("unsupported maxval {maxval}")));
    }
    let need = w * h * 3;
    let pixels = &bytes[pos..];
    if pixels.len() < need {
        return Err(image_err(path, format!("truncated pixel data: {} of {need} bytes", pixels.len())));
    }
    let mut t = Tensor::zeros([1, 3, h, w]);
    let scale = maxval as f32;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = pixels[(y * w + x) * 3 + c] as f32 / scale;
                t.set(0, c, y, x, v.min(1.0));
            }
        }
    }
    Ok(t)
}

pub fn load_image_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| image_err(path, e.to_string()))?;
    decode_ppm(&bytes, path)
}

/// Encode the first item of `image` as an 8-bit P6 PPM.
pub fn encode_ppm(image: &Tensor<f32>) -> Vec<u8> {
    let [_, c, h, w] = image.shape();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = image.at(0, ch.min(c - 1), y, x).clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn save_image_ppm(image: &Tensor<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(image))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Annotations

/// One line of an annotation file: `{"image": "...", "boxes": [[x1,y1,x2,y2], ...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image: String,
    pub boxes: Vec<BBox>,
}

/// One line of a detection dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image: String,
    pub detections: Vec<Detection>,
}

/// Parse a JSONL file, skipping blank lines and reporting 1-based line numbers.
pub fn read_jsonl<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<R: Serialize>(path: &Path, records: &[R]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    read_jsonl(path)
}

/// Image paths in an annotation file are taken relative to the file's directory.
pub fn resolve_image_path(annotations: &Path, image: &str) -> PathBuf {
    let p = Path::new(image);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        annotations.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Load every record of an annotation file together with its decoded image.
pub fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    let records = load_annotations(path)?;
    let mut out = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let image = load_image_ppm(&resolve_image_path(path, &rec.image))?;
        let (w, h) = (image.w() as f64, image.h() as f64);
        let mut gts = Vec::with_capacity(rec.boxes.len());
        for (j, b) in rec.boxes.iter().enumerate() {
            let gt = GroundTruth::new(*b);
            gt.validate(w, h)
                .map_err(|e| Error::InvalidBox(format!("record {} ({}), box {j}: {e}", i + 1, rec.image)))?;
            gts.push(gt);
        }
        out.push(Sample { image, gts, id: rec.image.clone() });
    }
    Ok(out)
}

/// Write samples as `<dir>/<id>.ppm` plus `<dir>/annotations.jsonl`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let name = format!("{}.ppm", s.id);
        save_image_ppm(&s.image, &dir.join(&name))?;
        records.push(AnnotationRecord {
            image: name,
            boxes: s.gts.iter().map(|g| g.bbox).collect(),
        });
    }
    let ann = dir.join("annotations.jsonl");
    write_jsonl(&ann, &records)?;
    Ok(ann)
}
