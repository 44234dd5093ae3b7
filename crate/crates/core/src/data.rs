//! Synthetic pedestrian images, dataset manifests, and PPM export.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dtsr;
use crate::error::{Error, Result};
use crate::labels::{AttributeSchema, LabelVector};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub labels: LabelVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: AttributeSchema,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn images(&self) -> Vec<&Tensor> {
        self.samples.iter().map(|s| &s.image).collect()
    }

    pub fn labels(&self) -> Vec<LabelVector> {
        self.samples.iter().map(|s| s.labels.clone()).collect()
    }

    /// Labels stacked into an `M×N` 0/1 matrix.
    pub fn targets(&self) -> Result<Tensor> {
        let n = self.schema.len();
        let data: Vec<f32> = self.samples.iter().flat_map(|s| s.labels.to_f32()).collect();
        Tensor::matrix(self.len(), n, data)
    }

    /// The first `count` samples.
    pub fn head(&self, count: usize) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            samples: self.samples.iter().take(count).cloned().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub train_samples: usize,
    pub test_samples: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub seed: u64,
    /// Amplitude of the additive uniform pixel noise.
    pub noise_amplitude: f32,
    /// Distance of attribute colors from mid-gray along their chroma direction.
    pub palette_contrast: f32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train_samples: 2000,
            test_samples: 500,
            image_height: 48,
            image_width: 24,
            seed: 0,
            noise_amplitude: 0.05,
            palette_contrast: 0.04,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_height < 24 || self.image_width < 12 {
            return Err(Error::Config(format!(
                "synthetic images must be at least 24×12, got {}×{}",
                self.image_height, self.image_width
            )));
        }
        if !(0.0..=0.5).contains(&self.noise_amplitude) {
            return Err(Error::Config(format!(
                "noise amplitude {} outside [0, 0.5]",
                self.noise_amplitude
            )));
        }
        if !(self.palette_contrast > 0.0 && self.palette_contrast <= 0.25) {
            return Err(Error::Config(format!(
                "palette contrast {} outside (0, 0.25]",
                self.palette_contrast
            )));
        }
        Ok(())
    }
}

pub struct SyntheticData {
    pub train: Dataset,
    pub test: Dataset,
}

type Rgb = [f32; 3];

/// Chroma directions; a color is `0.5 + contrast · v`.
const RED: Rgb = [1.0, -0.5, -0.5];
const GREEN: Rgb = [-0.5, 1.0, -0.5];
const BLUE: Rgb = [-0.5, -0.5, 1.0];
const DARK: Rgb = [-1.0, -1.0, -1.0];
const LIGHT: Rgb = [1.0, 1.0, 1.0];
const STRIPE: Rgb = [1.0, 1.0, -1.0];
const SKIN: Rgb = [0.8, 0.2, -0.4];

/// The no-hat choice shows dark hair.
const HATS: [Rgb; 3] = [RED, BLUE, DARK];
const TORSOS: [Rgb; 3] = [RED, GREEN, BLUE];
const SHOES: [Rgb; 2] = [DARK, LIGHT];
/// Per-channel color jitter as a fraction of the contrast.
const COLOR_JITTER: f32 = 0.25;
/// Background intensity range; the body averages 0.5, the background less.
const BACKGROUND: std::ops::Range<f32> = 0.30..0.36;

/// Row bands as fractions of the image height: hat, face, torso, legs, feet.
struct Layout {
    hat: (usize, usize),
    face: (usize, usize),
    torso: (usize, usize),
    legs: (usize, usize),
    feet: (usize, usize),
}

impl Layout {
    fn new(h: usize) -> Self {
        let r = |f: f32| ((f * h as f32).round() as usize).min(h);
        Layout {
            hat: (r(0.02), r(0.11)),
            face: (r(0.11), r(0.21)),
            torso: (r(0.23), r(0.56)),
            legs: (r(0.56), r(0.85)),
            feet: (r(0.85), r(0.96)),
        }
    }
}

/// Attribute choices for one person.
struct Person {
    wide: bool,
    head: usize,
    upper: usize,
    lower: usize,
    foot: usize,
}

impl Person {
    fn labels(&self) -> LabelVector {
        let mut bits = vec![0u8; 12];
        bits[0] = self.wide as u8;
        bits[1 + self.head] = 1;
        bits[4 + self.upper] = 1;
        bits[7 + self.lower] = 1;
        bits[10 + self.foot] = 1;
        LabelVector::new(bits).expect("binary labels")
    }
}

fn render(cfg: &SyntheticConfig, person: &Person, rng: &mut impl Rng) -> Tensor {
    let (h, w) = (cfg.image_height, cfg.image_width);
    let c = cfg.palette_contrast;
    let mut img = vec![0.0f32; 3 * h * w];
    let gray: f32 = rng.random_range(BACKGROUND);
    fill(&mut img, h, w, (0, h), (0, w), [gray; 3]);

    let j = COLOR_JITTER * c;
    let color = |v: Rgb, rng: &mut dyn rand::RngCore| -> Rgb {
        std::array::from_fn(|k| (0.5 + c * v[k] + rng.random_range(-j..=j)).clamp(0.0, 1.0))
    };
    let cx = w as isize / 2 + rng.random_range(-1i32..=1) as isize;
    let cols = |half: f32| {
        let half = (half * w as f32).round() as isize;
        ((cx - half).max(0) as usize, ((cx + half) as usize).min(w))
    };
    let lay = Layout::new(h);

    let head_cols = cols(0.17);
    fill(&mut img, h, w, lay.hat, head_cols, color(HATS[person.head], rng));
    fill(&mut img, h, w, lay.face, head_cols, color(SKIN, rng));

    let torso_cols = if person.wide { cols(0.34) } else { cols(0.21) };
    fill(&mut img, h, w, lay.torso, torso_cols, color(TORSOS[person.upper], rng));

    let leg_cols = cols(0.17);
    match person.lower {
        0 => fill(&mut img, h, w, lay.legs, leg_cols, color(DARK, rng)),
        1 => fill(&mut img, h, w, lay.legs, leg_cols, color(LIGHT, rng)),
        _ => {
            let (dark, stripe) = (color(DARK, rng), color(STRIPE, rng));
            for y in lay.legs.0..lay.legs.1 {
                let c = if (y / 2) % 2 == 0 { dark } else { stripe };
                fill(&mut img, h, w, (y, y + 1), leg_cols, c);
            }
        }
    }
    fill(&mut img, h, w, lay.feet, cols(0.21), color(SHOES[person.foot], rng));

    let a = cfg.noise_amplitude;
    if a > 0.0 {
        for v in img.iter_mut() {
            *v = (*v + rng.random_range(-a..=a)).clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[3, h, w], img).expect("image shape")
}

fn fill(img: &mut [f32], h: usize, w: usize, rows: (usize, usize), cols: (usize, usize), c: Rgb) {
    for (ch, &v) in c.iter().enumerate() {
        for y in rows.0..rows.1 {
            let base = (ch * h + y) * w;
            img[base + cols.0..base + cols.1].fill(v);
        }
    }
}

fn generate_split(cfg: &SyntheticConfig, split: u64, count: usize) -> Dataset {
    let schema = AttributeSchema::desk_default();
    let samples = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from(derive_seed(cfg.seed, &[split, i as u64]));
            let person = Person {
                wide: rng.random_bool(0.5),
                head: rng.random_range(0..3),
                upper: rng.random_range(0..3),
                lower: rng.random_range(0..3),
                foot: rng.random_range(0..2),
            };
            let image = render(cfg, &person, &mut rng);
            Sample {
                image,
                labels: person.labels(),
            }
        })
        .collect();
    Dataset { schema, samples }
}

/// Renders the train and test splits. Each sample draws from its own seeded
/// stream, so a sample does not depend on the split sizes.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    Ok(SyntheticData {
        train: generate_split(cfg, 0, cfg.train_samples),
        test: generate_split(cfg, 1, cfg.test_samples),
    })
}

/// Dataset manifest file layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: String,
    /// Schema path relative to the manifest.
    pub schema: String,
    pub records: Vec<ManifestRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    /// Image path relative to the manifest.
    pub image: String,
    pub labels: Vec<u8>,
}

pub const SCHEMA_FILE: &str = "schema.json";

pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.json"))
}

/// Writes `schema.json`, one DTSR file per image under `<split>/`, and
/// `<split>.json`. Returns the manifest path.
pub fn write_split(dir: &Path, split: &str, data: &Dataset) -> Result<PathBuf> {
    let img_dir = dir.join(split);
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    data.schema.save(&dir.join(SCHEMA_FILE))?;
    let mut records = Vec::with_capacity(data.len());
    for (i, s) in data.samples.iter().enumerate() {
        let rel = format!("{split}/{i:06}.dtsr");
        dtsr::save_tensor(&dir.join(&rel), &s.image)?;
        records.push(ManifestRecord {
            image: rel,
            labels: s.labels.bits().to_vec(),
        });
    }
    let manifest = DatasetManifest {
        split: split.to_string(),
        schema: SCHEMA_FILE.to_string(),
        records,
    };
    let path = manifest_path(dir, split);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn write_synthetic(dir: &Path, data: &SyntheticData) -> Result<(PathBuf, PathBuf)> {
    Ok((
        write_split(dir, "train", &data.train)?,
        write_split(dir, "test", &data.test)?,
    ))
}

/// Loads a manifest and every image it references.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let schema = AttributeSchema::load(&base.join(&manifest.schema))?;
    let mut samples = Vec::with_capacity(manifest.records.len());
    let mut dims: Option<Vec<usize>> = None;
    for rec in &manifest.records {
        let img_path = base.join(&rec.image);
        if rec.labels.len() != schema.len() {
            return Err(Error::Dataset(format!(
                "{}: {} labels, schema has {}",
                img_path.display(),
                rec.labels.len(),
                schema.len()
            )));
        }
        if !img_path.is_file() {
            return Err(Error::Dataset(format!("missing image file {}", img_path.display())));
        }
        let image = dtsr::load_tensor(&img_path)?;
        let (c, _, _) = image
            .dims3()
            .map_err(|_| Error::Dataset(format!("{}: not a C×H×W image", img_path.display())))?;
        if c != 3 || dims.as_deref().is_some_and(|d| d != image.shape()) {
            return Err(Error::Dataset(format!(
                "{}: image shape {:?} differs from the dataset",
                img_path.display(),
                image.shape()
            )));
        }
        dims.get_or_insert_with(|| image.shape().to_vec());
        let labels =
            LabelVector::new(rec.labels.clone()).map_err(|e| Error::Dataset(format!("{}: {e}", img_path.display())))?;
        samples.push(Sample { image, labels });
    }
    Ok(Dataset { schema, samples })
}

/// Maps a `C×H×W` tensor to 8-bit RGB as `clamp(0.5 + a·x)`, rounding half up.
pub fn noise_to_ppm(canvas: &Tensor, amplification: f32) -> Result<Vec<u8>> {
    if !(amplification > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "amplification must be positive, got {amplification}"
        )));
    }
    let (c, h, w) = canvas.dims3()?;
    if c != 3 {
        return Err(Error::InvalidShape(format!("PPM export needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = canvas.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = (0.5 + amplification * d[(ch * h + y) * w + x]).clamp(0.0, 1.0);
                out.push((v * 255.0 + 0.5).floor() as u8);
            }
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, canvas: &Tensor, amplification: f32) -> Result<()> {
    let bytes = noise_to_ppm(canvas, amplification)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
