//! Procedural dataset of smooth textures with optional blended artifacts.
//!
//! "Real" images are sums of seeded low-frequency sinusoid fields plus mild
//! Gaussian noise. "Fake" images additionally alpha-blend a hard-edged
//! circular patch of a differently-seeded texture, standing in for the
//! localized manipulation artifacts a detector must find. Samples are pure
//! functions of their seed; nothing is stored.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const NOISE_STD: f64 = 0.05;
const SINUSOID_FIELDS: usize = 3;
/// Artifact radius range as a fraction of the image side.
const RADIUS_MIN_FRAC: f64 = 0.12;
const RADIUS_MAX_FRAC: f64 = 0.28;

/// Parameters of the blended artifact patch carried by fake samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactParams {
    pub center: (f64, f64),
    pub radius: f64,
    /// Blend strength alpha in (0, 1].
    pub strength: f64,
}

/// Everything needed to deterministically generate one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSpec {
    pub seed: u64,
    pub size: usize,
    pub channels: usize,
    /// 1 = fake, 0 = real.
    pub label: u8,
    /// Present iff label == 1.
    pub artifact: Option<ArtifactParams>,
}

impl SampleSpec {
    fn validate(&self) -> Result<()> {
        if self.size == 0 || self.channels == 0 {
            return Err(Error::contract("sample size and channels must be >= 1"));
        }
        match (self.label, &self.artifact) {
            (0, None) => Ok(()),
            (1, Some(a)) => {
                if !(a.strength > 0.0 && a.strength <= 1.0) {
                    return Err(Error::contract(format!(
                        "artifact blend strength {} outside (0, 1]",
                        a.strength
                    )));
                }
                let s = self.size as f64;
                let inside = a.center.0 - a.radius >= 0.0
                    && a.center.1 - a.radius >= 0.0
                    && a.center.0 + a.radius <= s - 1.0
                    && a.center.1 + a.radius <= s - 1.0;
                if !inside {
                    return Err(Error::contract(format!(
                        "artifact at {:?} radius {} leaves the {s}x{s} image",
                        a.center, a.radius
                    )));
                }
                Ok(())
            }
            (1, None) => Err(Error::contract("fake sample without artifact parameters")),
            (0, Some(_)) => Err(Error::contract("real sample carries artifact parameters")),
            (l, _) => Err(Error::contract(format!("label {l} is not binary"))),
        }
    }
}

/// Base texture in [0,1]: sinusoid fields + noise, min-max normalized.
fn texture(rng: &mut Rng, size: usize) -> Vec<f64> {
    let mut img = vec![0.0; size * size];
    for _ in 0..SINUSOID_FIELDS {
        let amp = rng.uniform_in(0.5, 1.0);
        let fx = rng.uniform_in(0.5, 3.0);
        let fy = rng.uniform_in(0.5, 3.0);
        let phase = rng.uniform_in(0.0, 2.0 * std::f64::consts::PI);
        let tau = 2.0 * std::f64::consts::PI / size as f64;
        for y in 0..size {
            for x in 0..size {
                img[y * size + x] += amp * (tau * (fx * x as f64 + fy * y as f64) + phase).sin();
            }
        }
    }
    for v in img.iter_mut() {
        *v += rng.normal() * NOISE_STD;
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &img {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    for v in img.iter_mut() {
        *v = (*v - lo) / span;
    }
    img
}

/// Deterministically render one sample: [C,H,W] tensor in [0,1] plus label.
pub fn generate_sample(spec: &SampleSpec) -> Result<(Tensor, u8)> {
    spec.validate()?;
    let root = Rng::from_seed(spec.seed);
    let size = spec.size;
    let mut data = Vec::with_capacity(spec.channels * size * size);
    for ch in 0..spec.channels {
        let mut base_rng = root.stream("base").child(ch as u64);
        let mut channel = texture(&mut base_rng, size);
        if let Some(a) = &spec.artifact {
            let mut art_rng = root.stream("artifact").child(ch as u64);
            let patch = texture(&mut art_rng, size);
            let r2 = a.radius * a.radius;
            for y in 0..size {
                for x in 0..size {
                    let dx = x as f64 - a.center.0;
                    let dy = y as f64 - a.center.1;
                    if dx * dx + dy * dy <= r2 {
                        let i = y * size + x;
                        channel[i] = (1.0 - a.strength) * channel[i] + a.strength * patch[i];
                    }
                }
            }
        }
        data.extend_from_slice(&channel);
    }
    Ok((Tensor::new(vec![spec.channels, size, size], data)?, spec.label))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub count: usize,
    /// Fraction of fake samples; fake count rounds down (toward real).
    pub balance: f64,
    pub image_size: usize,
    pub channels: usize,
    /// Artifact blend strength range (difficulty).
    pub min_strength: f64,
    pub max_strength: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            count: 2400,
            balance: 0.5,
            image_size: 64,
            channels: 1,
            min_strength: 0.4,
            max_strength: 0.9,
            seed: 42,
        }
    }
}

impl DatasetConfig {
    pub fn fake_count(&self) -> usize {
        (self.count as f64 * self.balance).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.balance) {
            return Err(Error::config(format!("class balance {} outside [0,1]", self.balance)));
        }
        let fakes = self.fake_count();
        if self.count < 2 || fakes == 0 || fakes == self.count {
            return Err(Error::config(format!(
                "dataset needs at least one sample per class: count {}, fake {fakes}",
                self.count
            )));
        }
        if self.image_size == 0 || self.channels == 0 {
            return Err(Error::config("image size and channels must be >= 1"));
        }
        if !(self.min_strength > 0.0 && self.min_strength <= self.max_strength && self.max_strength <= 1.0) {
            return Err(Error::config(format!(
                "strength range [{}, {}] outside (0, 1]",
                self.min_strength, self.max_strength
            )));
        }
        Ok(())
    }
}

pub struct Sample {
    pub image: Tensor,
    pub label: u8,
    pub seed: u64,
}

pub struct Dataset {
    pub cfg: DatasetConfig,
    pub samples: Vec<Sample>,
}

/// Specs for every sample of a dataset, in final order. Exposed separately
/// so exports and generation share the exact plan.
pub fn dataset_specs(cfg: &DatasetConfig) -> Result<Vec<SampleSpec>> {
    cfg.validate()?;
    let root = Rng::from_seed(cfg.seed).stream("dataset");
    let mut labels = vec![0u8; cfg.count];
    for l in labels.iter_mut().take(cfg.fake_count()) {
        *l = 1;
    }
    root.stream("labels").shuffle(&mut labels);

    let seeds = root.stream("samples");
    let size = cfg.image_size as f64;
    let mut specs = Vec::with_capacity(cfg.count);
    for (i, &label) in labels.iter().enumerate() {
        let mut srng = seeds.child(i as u64);
        let seed = srng.next_u64();
        let artifact = if label == 1 {
            let radius = srng.uniform_in(RADIUS_MIN_FRAC * size, RADIUS_MAX_FRAC * size);
            let cx = srng.uniform_in(radius, size - 1.0 - radius);
            let cy = srng.uniform_in(radius, size - 1.0 - radius);
            let strength = srng.uniform_in(cfg.min_strength, cfg.max_strength);
            Some(ArtifactParams { center: (cx, cy), radius, strength })
        } else {
            None
        };
        specs.push(SampleSpec {
            seed,
            size: cfg.image_size,
            channels: cfg.channels,
            label,
            artifact,
        });
    }
    Ok(specs)
}

/// Generate the full dataset; deterministic given the config seed, with the
/// class balance honored exactly.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    let specs = dataset_specs(cfg)?;
    let mut samples = Vec::with_capacity(specs.len());
    for spec in &specs {
        let (image, label) = generate_sample(spec)?;
        samples.push(Sample { image, label, seed: spec.seed });
    }
    Ok(Dataset { cfg: cfg.clone(), samples })
}

impl Dataset {
    /// Stratified split: `val_fraction` of each class (rounded down, at
    /// least one sample) becomes validation. Deterministic in the dataset
    /// seed and never mixes across the boundary.
    pub fn stratified_split(&self, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for (i, s) in self.samples.iter().enumerate() {
            by_class[s.label as usize].push(i);
        }
        let mut rng = Rng::from_seed(self.cfg.seed).stream("split");
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for class in &mut by_class {
            rng.shuffle(class);
            let n_val = ((class.len() as f64 * val_fraction) as usize).max(1);
            val.extend_from_slice(&class[..n_val]);
            train.extend_from_slice(&class[n_val..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        (train, val)
    }

    /// Pack a list of sample indices into one [B,C,H,W] batch buffer.
    pub fn batch(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>, Vec<f64>) {
        let per = self.cfg.channels * self.cfg.image_size * self.cfg.image_size;
        let mut images = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(&self.samples[i].image.data);
            labels.push(self.samples[i].label as f64);
        }
        let shape = vec![indices.len(), self.cfg.channels, self.cfg.image_size, self.cfg.image_size];
        (images, shape, labels)
    }
}

/// Export images as PGM (1 channel) or PPM (3 channels) plus a manifest CSV
/// with columns path,label,seed. Returns the manifest path.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let manifest_path = dir.join("manifest.csv");
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(&manifest_path)?);
    writeln!(manifest, "path,label,seed")?;
    let size = dataset.cfg.image_size;
    for (i, s) in dataset.samples.iter().enumerate() {
        let (ext, magic, ch) = match dataset.cfg.channels {
            1 => ("pgm", "P5", 1usize),
            3 => ("ppm", "P6", 3usize),
            c => return Err(Error::config(format!("cannot export {c}-channel images"))),
        };
        let name = format!("sample_{i:05}.{ext}");
        let mut file = std::io::BufWriter::new(std::fs::File::create(dir.join(&name))?);
        write!(file, "{magic}\n{size} {size}\n255\n")?;
        let plane = size * size;
        let mut bytes = Vec::with_capacity(plane * ch);
        for p in 0..plane {
            for c in 0..ch {
                let v = s.image.data[c * plane + p];
                bytes.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        file.write_all(&bytes)?;
        writeln!(manifest, "{name},{},{}", s.label, s.seed)?;
    }
    Ok(manifest_path)
}
