//! Procedural generator of dense tiny-dot scenes with ground truth.
//!
//! A scene is a grayscale quarry-floor stand-in: base level, linear
//! illumination gradient, multi-octave value-noise texture, dark
//! Gaussian-profile dots with a faint pale halo (drilled holes read as a
//! dark core inside a ring of pale cuttings), optional dot-like
//! distractors that are labeled background, and per-pixel sensor noise.
//! Everything is a pure function of the spec, so the same seed always
//! yields the same bytes.
//!
//! Datasets cycle images through four difficulty tiers (bright/flat,
//! low-contrast, dark/textured, dark with distractors) and are stored as
//! 16-bit PGM files plus a line-per-record manifest.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::BBox;
use crate::error::{Error, Result};
use crate::rng;
use crate::stats::ImageBuffer;

/// Full description of one synthetic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub n_objects: usize,
    /// Mean dot radius in pixels and its uniform jitter.
    pub object_radius: f64,
    pub radius_jitter: f64,
    /// Minimum center distance between any two placed blobs.
    pub min_separation: f64,
    /// Peak-to-peak amplitude of the linear illumination gradient and its
    /// direction in radians.
    pub illumination: f64,
    pub illumination_dir: f64,
    /// Amplitude and base wavelength (pixels) of the value-noise texture.
    pub texture_amp: f64,
    pub texture_scale: f64,
    /// Count of dot-like clutter blobs that are not annotated.
    pub distractors: usize,
    /// Base intensity before any structure is added.
    pub background_level: f64,
    /// Depth of the dot's dark core and its relative jitter.
    pub object_contrast: f64,
    pub contrast_jitter: f64,
    /// Brightness of the pale halo around true dots, relative to the
    /// core depth. Distractors carry no halo, so this is the context cue
    /// that separates them from real objects.
    pub apron_strength: f64,
    /// Standard deviation of additive per-pixel sensor noise.
    pub sensor_noise: f64,
    pub seed: u64,
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Argument("scene dimensions must be positive".into()));
        }
        if self.min_separation < 0.0 {
            return Err(Error::Argument("min_separation must be >= 0".into()));
        }
        for (name, v) in [
            ("object_radius", self.object_radius),
            ("radius_jitter", self.radius_jitter),
            ("illumination", self.illumination),
            ("texture_amp", self.texture_amp),
            ("texture_scale", self.texture_scale),
            ("object_contrast", self.object_contrast),
            ("contrast_jitter", self.contrast_jitter),
            ("apron_strength", self.apron_strength),
            ("sensor_noise", self.sensor_noise),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Argument(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Ground-truth record for one dot: center, square box of side
/// `2 * radius`, and a stable id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub center: (f64, f64),
    pub bbox: BBox,
    pub id: usize,
}

struct Blob {
    cx: f64,
    cy: f64,
    radius: f64,
    /// Signed core amplitude: negative darkens.
    amplitude: f64,
    /// Halo brightness relative to `|amplitude|`; zero for distractors.
    apron: f64,
}

/// Renders a scene and its annotations. Deterministic in the spec.
pub fn generate_scene(spec: &SceneSpec) -> Result<(ImageBuffer, Vec<Annotation>)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);

    // Separate hash streams so adding pixels to one stage never shifts
    // another stage's values.
    let seed_place = rng::child_seed(spec.seed, 1);
    let seed_shape = rng::child_seed(spec.seed, 2);
    let seed_texture = rng::child_seed(spec.seed, 3);
    let seed_sensor = rng::child_seed(spec.seed, 4);

    let margin = (2.0 * spec.object_radius).ceil().max(1.0);
    let total = spec.n_objects + spec.distractors;
    let centers = place_centers(seed_place, w, h, total, spec.min_separation, margin)?;

    let mut blobs = Vec::with_capacity(total);
    let mut annotations = Vec::with_capacity(spec.n_objects);
    for (i, &(cx, cy)) in centers.iter().enumerate() {
        let radius = (spec.object_radius
            + spec.radius_jitter * symmetric(seed_shape, 2 * i as u64))
        .max(1.0);
        let contrast = spec.object_contrast
            * (1.0 + spec.contrast_jitter * symmetric(seed_shape, 2 * i as u64 + 1));
        if i < spec.n_objects {
            blobs.push(Blob {
                cx,
                cy,
                radius,
                amplitude: -contrast,
                apron: spec.apron_strength,
            });
            annotations.push(Annotation {
                center: (cx, cy),
                bbox: BBox::new(cx - radius, cy - radius, 2.0 * radius, 2.0 * radius)?,
                id: i,
            });
        } else {
            // Distractors alternate between an inverted (bright) blob and
            // a half-depth dark blob; neither gets a halo.
            let amplitude = if i % 2 == 0 {
                0.5 * contrast
            } else {
                -0.5 * contrast
            };
            blobs.push(Blob {
                cx,
                cy,
                radius,
                amplitude,
                apron: 0.0,
            });
        }
    }

    let dir = (spec.illumination_dir.cos(), spec.illumination_dir.sin());
    let diag = ((w * w + h * h) as f64).sqrt();
    let mut data = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let mut v = spec.background_level;
            if spec.illumination > 0.0 {
                let t = (x as f64 * dir.0 + y as f64 * dir.1) / diag;
                v += spec.illumination * (t - 0.5);
            }
            if spec.texture_amp > 0.0 {
                let n = fbm(
                    seed_texture,
                    x as f64 / spec.texture_scale,
                    y as f64 / spec.texture_scale,
                    4,
                );
                v += spec.texture_amp * (n - 0.5) * 2.0;
            }
            data[idx] = v;
        }
    }

    for blob in &blobs {
        stamp(&mut data, w, h, blob);
    }

    if spec.sensor_noise > 0.0 {
        for (idx, v) in data.iter_mut().enumerate() {
            *v += spec.sensor_noise * rng::normal(seed_sensor, idx as u64);
        }
    }

    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Ok((ImageBuffer::from_clamped(w, h, data), annotations))
}

/// Uniform value in `[-1, 1]`.
fn symmetric(seed: u64, index: u64) -> f64 {
    2.0 * rng::uniform01(rng::mix2(seed, index)) - 1.0
}

fn place_centers(
    seed: u64,
    width: usize,
    height: usize,
    count: usize,
    min_separation: f64,
    margin: f64,
) -> Result<Vec<(f64, f64)>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let lo_x = margin;
    let hi_x = width as f64 - 1.0 - margin;
    let lo_y = margin;
    let hi_y = height as f64 - 1.0 - margin;
    if !(lo_x < hi_x && lo_y < hi_y) {
        return Err(Error::Generation(format!(
            "margin {margin} leaves no room in a {width}x{height} frame"
        )));
    }
    let sep_sq = min_separation * min_separation;
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(count);
    let max_attempts = 400 * count as u64;
    let mut draw = 0u64;
    while centers.len() < count {
        if draw >= max_attempts {
            return Err(Error::Generation(format!(
                "placed {} of {count} blobs after {max_attempts} draws; \
                 min_separation {min_separation} is infeasible at {width}x{height}",
                centers.len()
            )));
        }
        let cx = lo_x + rng::uniform01(rng::mix2(seed, 2 * draw)) * (hi_x - lo_x);
        let cy = lo_y + rng::uniform01(rng::mix2(seed, 2 * draw + 1)) * (hi_y - lo_y);
        draw += 1;
        let clear = centers.iter().all(|&(ox, oy)| {
            let (dx, dy) = (cx - ox, cy - oy);
            dx * dx + dy * dy >= sep_sq
        });
        if clear {
            centers.push((cx, cy));
        }
    }
    Ok(centers)
}

/// Adds a blob profile to the raster: a Gaussian core of the blob's
/// amplitude plus, for annotated dots, a wider counter-signed halo.
fn stamp(data: &mut [f64], width: usize, height: usize, blob: &Blob) {
    let sigma = blob.radius / 1.5;
    let sigma_halo = sigma * 2.4;
    let reach = (3.0 * sigma_halo).ceil() as isize;
    let (cx, cy) = (blob.cx, blob.cy);
    let x0 = ((cx as isize) - reach).max(0);
    let x1 = ((cx as isize) + reach + 1).min(width as isize);
    let y0 = ((cy as isize) - reach).max(0);
    let y1 = ((cy as isize) + reach + 1).min(height as isize);
    let inv_core = 1.0 / (2.0 * sigma * sigma);
    let inv_halo = 1.0 / (2.0 * sigma_halo * sigma_halo);
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let r_sq = dx * dx + dy * dy;
            let mut delta = blob.amplitude * (-r_sq * inv_core).exp();
            if blob.apron > 0.0 {
                delta += blob.amplitude.abs() * blob.apron * (-r_sq * inv_halo).exp();
            }
            data[y as usize * width + x as usize] += delta;
        }
    }
}

/// Multi-octave value noise in roughly `[0, 1]`.
fn fbm(seed: u64, x: f64, y: f64, octaves: u32) -> f64 {
    let mut sum = 0.0;
    let mut amplitude = 1.0;
    let mut norm = 0.0;
    let mut fx = x;
    let mut fy = y;
    for octave in 0..octaves {
        sum += amplitude * value_noise(rng::child_seed(seed, octave as u64), fx, fy);
        norm += amplitude;
        amplitude *= 0.5;
        fx *= 2.0;
        fy *= 2.0;
    }
    sum / norm
}

/// Smoothstep-interpolated lattice noise in `[0, 1)`.
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let ix = x.floor();
    let iy = y.floor();
    let tx = smoothstep(x - ix);
    let ty = smoothstep(y - iy);
    let (ix, iy) = (ix as i64, iy as i64);
    let v00 = lattice(seed, ix, iy);
    let v10 = lattice(seed, ix + 1, iy);
    let v01 = lattice(seed, ix, iy + 1);
    let v11 = lattice(seed, ix + 1, iy + 1);
    let a = v00 + (v10 - v00) * tx;
    let b = v01 + (v11 - v01) * tx;
    a + (b - a) * ty
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    rng::uniform01(rng::mix2(rng::mix2(seed, ix as u64), iy as u64))
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

// ---------------------------------------------------------------------------
// Difficulty tiers and dataset generation
// ---------------------------------------------------------------------------

/// The four scenario families a dataset cycles through, ordered easy to
/// hard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    BrightFlat,
    LowContrast,
    DarkTextured,
    DarkDistractors,
}

impl Tier {
    pub const ALL: [Tier; 4] = [
        Tier::BrightFlat,
        Tier::LowContrast,
        Tier::DarkTextured,
        Tier::DarkDistractors,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Tier::BrightFlat => "bright_flat",
            Tier::LowContrast => "low_contrast",
            Tier::DarkTextured => "dark_textured",
            Tier::DarkDistractors => "dark_distractors",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Tier> {
        Tier::ALL
            .into_iter()
            .find(|t| t.tag() == tag)
            .ok_or_else(|| Error::Format(format!("unknown tier tag '{tag}'")))
    }

    /// Appearance profile: `(background, illumination, texture_amp,
    /// contrast, distractors, sensor_noise)`. Darkness is multiplicative —
    /// dark tiers scale the whole scene down, the way a gain drop would —
    /// so contrast shrinks with the background.
    fn profile(&self) -> (f64, f64, f64, f64, usize, f64) {
        match self {
            Tier::BrightFlat => (0.60, 0.04, 0.030, 0.40, 0, 0.010),
            Tier::LowContrast => (0.50, 0.06, 0.050, 0.22, 0, 0.015),
            Tier::DarkTextured => (0.30, 0.08, 0.080, 0.20, 0, 0.018),
            Tier::DarkDistractors => (0.30, 0.08, 0.070, 0.20, 40, 0.018),
        }
    }
}

/// Parameters for a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub width: usize,
    pub height: usize,
    pub images: usize,
    /// Mean object count per image and its uniform integer jitter.
    pub objects_mean: usize,
    pub objects_jitter: usize,
    pub object_radius: f64,
    pub radius_jitter: f64,
    pub min_separation: f64,
    /// Tiers to cycle through, in order.
    pub tiers: Vec<Tier>,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            width: 512,
            height: 512,
            images: 60,
            objects_mean: 100,
            objects_jitter: 10,
            object_radius: 3.0,
            radius_jitter: 0.5,
            min_separation: 10.0,
            tiers: Tier::ALL.to_vec(),
            seed: 42,
        }
    }
}

impl DatasetConfig {
    /// Scene spec for image `index`, drawn deterministically from the
    /// dataset seed.
    pub fn scene_spec(&self, index: usize) -> Result<SceneSpec> {
        if self.tiers.is_empty() {
            return Err(Error::Argument("dataset needs at least one tier".into()));
        }
        let tier = self.tiers[index % self.tiers.len()];
        let (background, illumination, texture_amp, contrast, distractors, noise) = tier.profile();
        let seed = rng::child_seed(self.seed, index as u64);
        let n_objects = if self.objects_jitter > 0 {
            let span = (2 * self.objects_jitter + 1) as u64;
            let offset = (rng::mix2(seed, 0) % span) as usize;
            self.objects_mean + offset - self.objects_jitter
        } else {
            self.objects_mean
        };
        Ok(SceneSpec {
            width: self.width,
            height: self.height,
            n_objects,
            object_radius: self.object_radius,
            radius_jitter: self.radius_jitter,
            min_separation: self.min_separation,
            illumination,
            illumination_dir: rng::uniform01(rng::mix2(seed, 1)) * std::f64::consts::TAU,
            texture_amp,
            texture_scale: 24.0,
            distractors,
            background_level: background,
            object_contrast: contrast,
            contrast_jitter: 0.25,
            apron_strength: 0.35,
            sensor_noise: noise,
            seed,
        })
    }

    pub fn tier_of(&self, index: usize) -> Tier {
        self.tiers[index % self.tiers.len().max(1)]
    }
}

/// One manifest line: where the image lives and what is in it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Image path relative to the manifest file.
    pub image: String,
    pub width: usize,
    pub height: usize,
    /// Ground-truth boxes as `(cx, cy, w, h)` in pixels, origin top-left.
    pub objects: Vec<(f64, f64, f64, f64)>,
    pub tier: String,
    pub seed: u64,
}

impl ManifestRecord {
    /// Annotations reconstructed from the stored center/size tuples.
    pub fn annotations(&self) -> Result<Vec<Annotation>> {
        self.objects
            .iter()
            .enumerate()
            .map(|(id, &(cx, cy, w, h))| {
                Ok(Annotation {
                    center: (cx, cy),
                    bbox: BBox::new(cx - w / 2.0, cy - h / 2.0, w, h)?,
                    id,
                })
            })
            .collect()
    }
}

/// Generates `config.images` scenes, writes them as 16-bit PGM files plus
/// a `manifest.jsonl`, and returns the records. Scenes render in parallel;
/// the manifest is written last, in index order.
pub fn generate_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<Vec<ManifestRecord>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let rendered: Vec<(String, ImageBuffer, Vec<Annotation>, Tier, u64)> = (0..config.images)
        .into_par_iter()
        .map(|i| {
            let spec = config.scene_spec(i)?;
            let (image, annotations) = generate_scene(&spec)?;
            Ok((
                format!("img_{i:04}.pgm"),
                image,
                annotations,
                config.tier_of(i),
                spec.seed,
            ))
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::with_capacity(rendered.len());
    for (name, image, annotations, tier, seed) in &rendered {
        write_pgm(&out_dir.join(name), image)?;
        records.push(ManifestRecord {
            image: name.clone(),
            width: image.width(),
            height: image.height(),
            objects: annotations
                .iter()
                .map(|a| (a.center.0, a.center.1, a.bbox.w, a.bbox.h))
                .collect(),
            tier: tier.tag().to_string(),
            seed: *seed,
        });
    }
    write_manifest(&out_dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}

/// Serializes records as one JSON object per line.
pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = String::new();
    for record in records {
        out.push_str(
            &serde_json::to_string(record)
                .map_err(|e| Error::Format(format!("manifest encode: {e}")))?,
        );
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("manifest line '{line}': {e}")))
        })
        .collect()
}

/// A manifest record joined with its decoded image.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub image: ImageBuffer,
    pub annotations: Vec<Annotation>,
    pub tier: Tier,
}

/// Loads every record of a manifest along with its image file.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<DatasetItem>> {
    let records = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    records
        .par_iter()
        .map(|record| {
            let image = read_pgm(&base.join(&record.image))?;
            if image.width() != record.width || image.height() != record.height {
                return Err(Error::Format(format!(
                    "{}: file is {}x{} but manifest says {}x{}",
                    record.image,
                    image.width(),
                    image.height(),
                    record.width,
                    record.height
                )));
            }
            Ok(DatasetItem {
                image,
                annotations: record.annotations()?,
                tier: Tier::from_tag(&record.tier)?,
            })
        })
        .collect()
}

/// Writes a 16-bit binary PGM (P5, big-endian samples).
pub fn write_pgm(path: &Path, image: &ImageBuffer) -> Result<()> {
    let mut bytes = Vec::with_capacity(32 + image.pixels().len() * 2);
    bytes.extend_from_slice(
        format!("P5\n{} {}\n65535\n", image.width(), image.height()).as_bytes(),
    );
    for &v in image.pixels() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads an 8- or 16-bit binary PGM into `[0, 1]` intensities.
pub fn read_pgm(path: &Path) -> Result<ImageBuffer> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));

    // Header: magic, width, height, maxval, separated by whitespace, with
    // '#' comment lines allowed.
    let mut pos = 0usize;
    let mut fields: Vec<String> = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace after maxval

    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let maxval: u32 = fields[3].parse().map_err(|_| bad("bad maxval"))?;
    let n = width * height;
    let data = match maxval {
        255 => {
            let raw = bytes
                .get(pos..pos + n)
                .ok_or_else(|| bad("short pixel data"))?;
            raw.iter().map(|&b| b as f64 / 255.0).collect::<Vec<_>>()
        }
        65535 => {
            let raw = bytes
                .get(pos..pos + 2 * n)
                .ok_or_else(|| bad("short pixel data"))?;
            raw.chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
                .collect::<Vec<_>>()
        }
        other => return Err(bad(&format!("unsupported maxval {other}"))),
    };
    ImageBuffer::new(width, height, data)
}
