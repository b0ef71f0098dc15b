//! Synthetic ambiguous-segmentation data with an analytically known
//! annotation distribution, crop operations, and bit-exact dataset I/O.
//!
//! Each image holds one soft-edged disk over Gaussian background noise.
//! Four annotators independently produce either an empty mask (with a
//! contrast-dependent probability) or the disk eroded/dilated by their own
//! radius offset, so positive masks are nested and every pairwise IoU
//! follows from pixel counts. The full outcome distribution per image is
//! enumerable, which gives an exact expected GED oracle.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::derive_seed;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const ANNOTATORS: usize = 4;

/// Half-width in pixels of the soft intensity edge around the lesion.
const EDGE_WIDTH: f64 = 1.5;

/// Give up on the non-empty redraw loop after this many attempts.
const MAX_REDRAWS: usize = 10_000;

const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_size: usize,
    /// Base lesion radius, drawn uniformly per sample.
    pub lesion_radius_range: (f64, f64),
    /// Lesion intensity over the background, drawn uniformly per sample.
    pub contrast_range: (f64, f64),
    /// Annotator-empty probability at (min, max) contrast; interpolated
    /// linearly in between and clamped outside.
    pub empty_prob_range: (f64, f64),
    /// Standard deviation of the background noise.
    pub noise_std: f64,
    /// Per-annotator radius offsets applied to positive masks.
    pub boundary_jitter: [f64; ANNOTATORS],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 32,
            lesion_radius_range: (4.0, 8.0),
            contrast_range: (0.2, 1.0),
            empty_prob_range: (0.8, 0.05),
            noise_std: 0.1,
            boundary_jitter: [-2.0, -1.0, 1.0, 2.0],
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Annotator-empty probability for a given contrast.
    pub fn empty_prob(&self, contrast: f64) -> f64 {
        let (c_min, c_max) = self.contrast_range;
        let (p_min_c, p_max_c) = self.empty_prob_range;
        let frac = if c_max > c_min {
            ((contrast - c_min) / (c_max - c_min)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (p_min_c + frac * (p_max_c - p_min_c)).clamp(0.0, 1.0)
    }

    fn validate(&self) -> Result<()> {
        let (r_min, r_max) = self.lesion_radius_range;
        if !(r_min > 0.0 && r_max >= r_min) {
            return Err(Error::Config(format!(
                "invalid lesion radius range ({r_min}, {r_max})"
            )));
        }
        let max_jitter = self
            .boundary_jitter
            .iter()
            .cloned()
            .fold(0.0f64, |a, b| a.max(b));
        let margin = r_max + max_jitter + 1.0;
        if 2.0 * margin > (self.image_size as f64 - 1.0) {
            return Err(Error::Config(format!(
                "lesion radius up to {r_max} (+{max_jitter} jitter) does not fit a {}px image",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Generator record for one sample; enough to reconstruct the annotation
/// distribution exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub index: u64,
    pub center: (f64, f64),
    pub radius: f64,
    pub contrast: f64,
    pub empty_prob: f64,
    pub annotator_empty: [bool; ANNOTATORS],
}

/// One image with its four expert masks.
#[derive(Debug, Clone)]
pub struct AnnotatedSample {
    /// `[1, H, W]`, values in [-1, 1].
    pub image: Tensor<f32>,
    /// Four binary `[1, H, W]` masks.
    pub masks: Vec<Tensor<f32>>,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: SynthConfig,
    pub samples: Vec<AnnotatedSample>,
}

impl AnnotatedSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

fn disk_mask(h: usize, w: usize, center: (f64, f64), radius: f64) -> Vec<f32> {
    let mut data = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - center.0;
            let dx = x as f64 - center.1;
            if (dy * dy + dx * dx).sqrt() <= radius {
                data[y * w + x] = 1.0;
            }
        }
    }
    data
}

fn generate_sample(cfg: &SynthConfig, index: u64) -> Result<AnnotatedSample> {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, index));
    let size = cfg.image_size;
    let (r_min, r_max) = cfg.lesion_radius_range;
    let (c_min, c_max) = cfg.contrast_range;
    let max_jitter = cfg
        .boundary_jitter
        .iter()
        .cloned()
        .fold(0.0f64, |a, b| a.max(b));

    for _ in 0..MAX_REDRAWS {
        let radius = rng.gen_range(r_min..=r_max);
        let margin = radius + max_jitter + 1.0;
        let lo = margin;
        let hi = size as f64 - 1.0 - margin;
        let cy = rng.gen_range(lo..=hi);
        let cx = rng.gen_range(lo..=hi);
        let contrast = rng.gen_range(c_min..=c_max);
        let p = cfg.empty_prob(contrast);
        let empty: [bool; ANNOTATORS] = std::array::from_fn(|_| rng.gen::<f64>() < p);
        if empty.iter().all(|e| *e) {
            continue; // every image keeps at least one positive annotation
        }

        let mut image = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let dist = (dy * dy + dx * dx).sqrt();
                let soft = ((radius - dist) / EDGE_WIDTH + 0.5).clamp(0.0, 1.0);
                let noise: f64 = f64::sample_standard_normal(&mut rng);
                let v = contrast * soft + cfg.noise_std * noise;
                image.push(v.clamp(-1.0, 1.0) as f32);
            }
        }

        let masks = (0..ANNOTATORS)
            .map(|k| {
                let data = if empty[k] {
                    vec![0.0f32; size * size]
                } else {
                    disk_mask(size, size, (cy, cx), radius + cfg.boundary_jitter[k])
                };
                Tensor::from_vec(&[1, size, size], data)
            })
            .collect::<Result<Vec<_>>>()?;

        return Ok(AnnotatedSample {
            image: Tensor::from_vec(&[1, size, size], image)?,
            masks,
            meta: SampleMeta {
                index,
                center: (cy, cx),
                radius,
                contrast,
                empty_prob: p,
                annotator_empty: empty,
            },
        });
    }
    Err(Error::Config(
        "empty probability too high to satisfy the non-empty-annotation invariant".into(),
    ))
}

/// Generate `n` samples; deterministic given the config seed, one derived
/// RNG stream per sample.
pub fn generate(cfg: &SynthConfig, n: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Usage("generate needs n >= 1".into()));
    }
    cfg.validate()?;
    let samples = (0..n)
        .map(|i| generate_sample(cfg, i as u64))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: cfg.clone(),
        samples,
    })
}

/// Exact expected squared GED between a perfect sampler of the generator's
/// annotation distribution and the sample's four drawn masks.
///
/// The annotation distribution has at most five outcomes (empty plus the
/// four jittered disks), so every expectation reduces to a finite sum over
/// outcome pairs. Diversity terms use ordered distinct pairs, matching the
/// estimator in the metrics module, so the empirical GED of a perfect
/// sampler is an unbiased estimate of this value.
pub fn oracle_ged(sample: &AnnotatedSample, cfg: &SynthConfig) -> f64 {
    let (h, w) = (sample.height(), sample.width());
    let meta = &sample.meta;
    let p = meta.empty_prob;

    // Outcome areas on the sample's current grid (crops included).
    let disk_areas: Vec<f64> = cfg
        .boundary_jitter
        .iter()
        .map(|j| {
            disk_mask(h, w, meta.center, meta.radius + j)
                .iter()
                .map(|v| *v as f64)
                .sum()
        })
        .collect();

    // d(a, b) for nested disks by area; None encodes the empty mask.
    let dist = |a: Option<f64>, b: Option<f64>| -> f64 {
        match (a, b) {
            (None, None) => 0.0,
            (None, Some(area)) | (Some(area), None) => {
                if area == 0.0 {
                    0.0
                } else {
                    1.0
                }
            }
            (Some(x), Some(y)) => {
                let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
                if hi == 0.0 {
                    0.0
                } else {
                    1.0 - lo / hi
                }
            }
        }
    };

    // Model outcomes: empty with probability p, each disk with (1-p)/4.
    let outcomes: Vec<(f64, Option<f64>)> = std::iter::once((p, None))
        .chain(
            disk_areas
                .iter()
                .map(|a| ((1.0 - p) / ANNOTATORS as f64, Some(*a))),
        )
        .collect();

    // Ground-truth masks as areas (empty annotators hold area-zero masks).
    let gts: Vec<Option<f64>> = (0..ANNOTATORS)
        .map(|k| {
            if meta.annotator_empty[k] {
                None
            } else {
                Some(disk_areas[k])
            }
        })
        .collect();

    let cross: f64 = outcomes
        .iter()
        .map(|(prob, o)| {
            let mean_d: f64 = gts.iter().map(|g| dist(*o, *g)).sum::<f64>() / gts.len() as f64;
            prob * mean_d
        })
        .sum();

    let self_div: f64 = outcomes
        .iter()
        .flat_map(|(pa, a)| outcomes.iter().map(move |(pb, b)| pa * pb * dist(*a, *b)))
        .sum();

    let mut gt_div = 0.0;
    let mut pairs = 0usize;
    for (i, a) in gts.iter().enumerate() {
        for (j, b) in gts.iter().enumerate() {
            if i != j {
                gt_div += dist(*a, *b);
                pairs += 1;
            }
        }
    }
    gt_div /= pairs as f64;

    2.0 * cross - self_div - gt_div
}

fn crop_tensor(t: &Tensor<f32>, y0: usize, x0: usize, size: usize) -> Tensor<f32> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    debug_assert!(y0 + size <= h && x0 + size <= w);
    let mut data = Vec::with_capacity(size * size);
    for y in y0..y0 + size {
        data.extend_from_slice(&t.data()[y * w + x0..y * w + x0 + size]);
    }
    Tensor::from_vec(&[1, size, size], data).expect("consistent")
}

fn crop_sample(sample: &AnnotatedSample, y0: usize, x0: usize, size: usize) -> AnnotatedSample {
    let mut meta = sample.meta.clone();
    meta.center = (meta.center.0 - y0 as f64, meta.center.1 - x0 as f64);
    AnnotatedSample {
        image: crop_tensor(&sample.image, y0, x0, size),
        masks: sample
            .masks
            .iter()
            .map(|m| crop_tensor(m, y0, x0, size))
            .collect(),
        meta,
    }
}

/// Crop the centered `size x size` window from image and masks alike.
pub fn central_crop(sample: &AnnotatedSample, size: usize) -> Result<AnnotatedSample> {
    let (h, w) = (sample.height(), sample.width());
    if size > h || size > w {
        return Err(Error::Usage(format!(
            "crop size {size} exceeds image size {h}x{w}"
        )));
    }
    Ok(crop_sample(sample, (h - size) / 2, (w - size) / 2, size))
}

/// Crop a uniformly placed `size x size` window.
pub fn random_crop(
    sample: &AnnotatedSample,
    size: usize,
    rng: &mut ChaCha12Rng,
) -> Result<AnnotatedSample> {
    let (h, w) = (sample.height(), sample.width());
    if size > h || size > w {
        return Err(Error::Usage(format!(
            "crop size {size} exceeds image size {h}x{w}"
        )));
    }
    let y0 = rng.gen_range(0..=h - size);
    let x0 = rng.gen_range(0..=w - size);
    Ok(crop_sample(sample, y0, x0, size))
}

// ---------------------------------------------------------------------------
// Dataset directory format: manifest.toml plus one raw little-endian blob.
// Images are stored as f32, masks as u8, row-major, per sample.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    image_dtype: String,
    mask_dtype: String,
    endianness: String,
    n_samples: u64,
    image_size: u64,
    annotators: u64,
    synth: SynthConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    experiment: Option<toml::Table>,
    samples: Vec<SampleMeta>,
}

fn sample_bytes(size: usize) -> u64 {
    let hw = (size * size) as u64;
    hw * 4 + hw * ANNOTATORS as u64
}

/// Write `dataset` under `path` (a directory). `experiment` is an optional
/// resolved-configuration table echoed into the manifest.
pub fn write_dataset(
    dataset: &Dataset,
    path: &Path,
    experiment: Option<toml::Table>,
) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let size = dataset.config.image_size;
    let manifest = Manifest {
        version: DATASET_VERSION,
        image_dtype: "f32".into(),
        mask_dtype: "u8".into(),
        endianness: "little".into(),
        n_samples: dataset.samples.len() as u64,
        image_size: size as u64,
        annotators: ANNOTATORS as u64,
        synth: dataset.config.clone(),
        experiment,
        samples: dataset.samples.iter().map(|s| s.meta.clone()).collect(),
    };
    let manifest_text = toml::to_string(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization failed: {e}")))?;
    let manifest_path = path.join("manifest.toml");
    fs::write(&manifest_path, manifest_text)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;

    let mut blob = Vec::with_capacity(dataset.samples.len() * sample_bytes(size) as usize);
    for s in &dataset.samples {
        for v in s.image.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        for m in &s.masks {
            blob.extend(m.data().iter().map(|v| *v as u8));
        }
    }
    let blob_path = path.join("data.bin");
    fs::write(&blob_path, blob).map_err(|e| Error::io(blob_path.display().to_string(), e))?;
    Ok(())
}

/// Read a dataset directory written by [`write_dataset`].
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = path.join("manifest.toml");
    let manifest_text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: Manifest = toml::from_str(&manifest_text).map_err(|e| Error::CorruptHeader {
        path: manifest_path.display().to_string(),
        detail: e.to_string(),
    })?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            path: manifest_path.display().to_string(),
            found: manifest.version,
            supported: DATASET_VERSION,
        });
    }
    if manifest.samples.len() as u64 != manifest.n_samples {
        return Err(Error::CorruptHeader {
            path: manifest_path.display().to_string(),
            detail: format!(
                "manifest lists {} sample records but declares n_samples = {}",
                manifest.samples.len(),
                manifest.n_samples
            ),
        });
    }

    let size = manifest.image_size as usize;
    let blob_path = path.join("data.bin");
    let blob = fs::read(&blob_path).map_err(|e| Error::io(blob_path.display().to_string(), e))?;
    let expected = manifest.n_samples * sample_bytes(size);
    if (blob.len() as u64) < expected {
        return Err(Error::TruncatedBlob {
            path: blob_path.display().to_string(),
            expected,
            found: blob.len() as u64,
        });
    }
    if blob.len() as u64 != expected {
        return Err(Error::CorruptHeader {
            path: blob_path.display().to_string(),
            detail: format!(
                "blob holds {} bytes but the manifest accounts for exactly {expected}",
                blob.len()
            ),
        });
    }

    let hw = size * size;
    let mut samples = Vec::with_capacity(manifest.n_samples as usize);
    let mut off = 0usize;
    for meta in manifest.samples {
        let mut image = Vec::with_capacity(hw);
        for _ in 0..hw {
            image.push(f32::from_le_bytes(blob[off..off + 4].try_into().unwrap()));
            off += 4;
        }
        let mut masks = Vec::with_capacity(ANNOTATORS);
        for _ in 0..ANNOTATORS {
            let data: Vec<f32> = blob[off..off + hw].iter().map(|b| *b as f32).collect();
            off += hw;
            masks.push(Tensor::from_vec(&[1, size, size], data)?);
        }
        samples.push(AnnotatedSample {
            image: Tensor::from_vec(&[1, size, size], image)?,
            masks,
            meta,
        });
    }
    Ok(Dataset {
        config: manifest.synth,
        samples,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stack (sample, annotator) picks into a training batch with targets
    /// encoded into {-1, +1}.
    pub fn stack_batch(&self, picks: &[(usize, usize)]) -> Result<crate::diffusion::TrainBatch> {
        if picks.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let size = self.config.image_size;
        let hw = size * size;
        let mut images = Vec::with_capacity(picks.len() * hw);
        let mut targets = Vec::with_capacity(picks.len() * hw);
        for &(si, ai) in picks {
            let s = &self.samples[si];
            images.extend_from_slice(s.image.data());
            targets.extend(s.masks[ai].data().iter().map(|m| 2.0 * m - 1.0));
        }
        Ok(crate::diffusion::TrainBatch {
            images: Tensor::from_vec(&[picks.len(), 1, size, size], images)?,
            targets_pm: Tensor::from_vec(&[picks.len(), 1, size, size], targets)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            image_size: 16,
            lesion_radius_range: (3.0, 4.0),
            contrast_range: (0.2, 1.0),
            empty_prob_range: (0.8, 0.05),
            noise_std: 0.1,
            boundary_jitter: [-2.0, -1.0, 1.0, 2.0],
            seed: 7,
        }
    }

    #[test]
    fn zero_empty_probability_keeps_all_masks_positive() {
        let cfg = SynthConfig {
            empty_prob_range: (0.0, 0.0),
            ..small_cfg()
        };
        let ds = generate(&cfg, 32).unwrap();
        for s in &ds.samples {
            for m in &s.masks {
                assert!(m.data().iter().any(|v| *v == 1.0));
            }
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let cfg = small_cfg();
        let a = generate(&cfg, 8).unwrap();
        let b = generate(&cfg, 8).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.meta, y.meta);
            for (mx, my) in x.masks.iter().zip(&y.masks) {
                assert_eq!(mx.data(), my.data());
            }
        }
    }

    #[test]
    fn every_sample_has_a_positive_annotation() {
        let cfg = SynthConfig {
            empty_prob_range: (0.85, 0.85),
            ..small_cfg()
        };
        let ds = generate(&cfg, 64).unwrap();
        for s in &ds.samples {
            assert!(
                s.meta.annotator_empty.iter().any(|e| !*e),
                "all-empty sample slipped through"
            );
        }
    }

    #[test]
    fn positive_masks_are_nested() {
        let cfg = SynthConfig {
            empty_prob_range: (0.0, 0.0),
            ..small_cfg()
        };
        let ds = generate(&cfg, 16).unwrap();
        for s in &ds.samples {
            // jitter offsets are sorted, so each mask contains the previous
            for k in 1..ANNOTATORS {
                let smaller = s.masks[k - 1].data();
                let larger = s.masks[k].data();
                for (a, b) in smaller.iter().zip(larger) {
                    assert!(*a <= *b, "erosion not contained in dilation");
                }
            }
        }
    }

    #[test]
    fn empty_frequency_matches_binomial_bounds() {
        // Fixed contrast makes p constant; conditioning on at least one
        // positive annotation biases the rate by ~p^3 (1-p) / (1-p^4),
        // far below the 3-sigma band at p = 0.1.
        let cfg = SynthConfig {
            image_size: 12,
            lesion_radius_range: (2.0, 2.5),
            contrast_range: (0.5, 0.5),
            empty_prob_range: (0.1, 0.1),
            noise_std: 0.1,
            boundary_jitter: [-1.0, -0.5, 0.5, 1.0],
            seed: 99,
        };
        let n = 10_000;
        let ds = generate(&cfg, n).unwrap();
        let empties: usize = ds
            .samples
            .iter()
            .map(|s| s.meta.annotator_empty.iter().filter(|e| **e).count())
            .sum();
        let freq = empties as f64 / (n * ANNOTATORS) as f64;
        let sigma = (0.1 * 0.9 / (n * ANNOTATORS) as f64).sqrt();
        assert!(
            (freq - 0.1).abs() < 3.0 * sigma,
            "empty frequency {freq} outside 3 sigma of 0.1 (sigma {sigma})"
        );
    }

    #[test]
    fn impossible_radius_is_rejected() {
        let cfg = SynthConfig {
            image_size: 8,
            lesion_radius_range: (6.0, 10.0),
            ..small_cfg()
        };
        assert!(matches!(generate(&cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn oracle_ged_is_zero_for_a_degenerate_distribution() {
        // With no empties and no jitter every outcome is the same disk, so
        // the perfect sampler matches the drawn masks exactly.
        let cfg = SynthConfig {
            empty_prob_range: (0.0, 0.0),
            boundary_jitter: [0.0, 0.0, 0.0, 0.0],
            ..small_cfg()
        };
        let ds = generate(&cfg, 4).unwrap();
        for s in &ds.samples {
            let g = oracle_ged(s, &cfg);
            assert!(g.abs() < 1e-12, "degenerate-distribution GED {g}");
        }
    }

    #[test]
    fn oracle_ged_hand_enumerated_case() {
        // Equal disks, p = 0.5, one positive annotator among four.
        // Cross term: empty outcome (prob 0.5) sees mean d = 1/4; each disk
        // outcome sees mean d = 3/4 -> cross = 0.5*0.25 + 0.5*0.75 = 0.5.
        // Self term: differing emptiness only -> 2 p (1-p) = 0.5.
        // GT diversity: 6 of 12 ordered pairs mix empty/positive -> 0.5.
        // Expected GED = 2*0.5 - 0.5 - 0.5 = 0.
        let cfg = SynthConfig {
            boundary_jitter: [0.0, 0.0, 0.0, 0.0],
            ..small_cfg()
        };
        let ds = generate(&cfg, 1).unwrap();
        let mut s = ds.samples[0].clone();
        s.meta.empty_prob = 0.5;
        s.meta.annotator_empty = [false, true, true, true];
        let g = oracle_ged(&s, &cfg);
        assert!(g.abs() < 1e-12, "hand-enumerated GED {g}");
    }

    #[test]
    fn oracle_ged_matches_monte_carlo() {
        let cfg = small_cfg();
        let ds = generate(&cfg, 3).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1234);
        for s in &ds.samples {
            let exact = oracle_ged(s, &cfg);

            let p = s.meta.empty_prob;
            let areas: Vec<f64> = cfg
                .boundary_jitter
                .iter()
                .map(|j| {
                    disk_mask(16, 16, s.meta.center, s.meta.radius + j)
                        .iter()
                        .map(|v| *v as f64)
                        .sum()
                })
                .collect();
            let gt_areas: Vec<Option<f64>> = (0..ANNOTATORS)
                .map(|k| {
                    if s.meta.annotator_empty[k] {
                        None
                    } else {
                        Some(areas[k])
                    }
                })
                .collect();
            let draw = |rng: &mut ChaCha12Rng| -> Option<f64> {
                if rng.gen::<f64>() < p {
                    None
                } else {
                    Some(areas[rng.gen_range(0..ANNOTATORS)])
                }
            };
            let dist = |a: Option<f64>, b: Option<f64>| -> f64 {
                match (a, b) {
                    (None, None) => 0.0,
                    (None, Some(x)) | (Some(x), None) => {
                        if x == 0.0 {
                            0.0
                        } else {
                            1.0
                        }
                    }
                    (Some(x), Some(y)) => 1.0 - x.min(y) / x.max(y),
                }
            };

            let m = 100_000;
            let mut cross = 0.0;
            let mut self_div = 0.0;
            let mut cross_sq = 0.0;
            let mut self_sq = 0.0;
            for _ in 0..m {
                let a = draw(&mut rng);
                let b = draw(&mut rng);
                let c: f64 =
                    gt_areas.iter().map(|g| dist(a, *g)).sum::<f64>() / ANNOTATORS as f64;
                let sd = dist(a, b);
                cross += c;
                self_div += sd;
                cross_sq += c * c;
                self_sq += sd * sd;
            }
            let cross_mean = cross / m as f64;
            let self_mean = self_div / m as f64;
            let mut gt_div = 0.0;
            for (i, a) in gt_areas.iter().enumerate() {
                for (j, b) in gt_areas.iter().enumerate() {
                    if i != j {
                        gt_div += dist(*a, *b);
                    }
                }
            }
            gt_div /= (ANNOTATORS * (ANNOTATORS - 1)) as f64;
            let estimate = 2.0 * cross_mean - self_mean - gt_div;

            let var_cross = cross_sq / m as f64 - cross_mean * cross_mean;
            let var_self = self_sq / m as f64 - self_mean * self_mean;
            let se = ((4.0 * var_cross + var_self) / m as f64).sqrt();
            assert!(
                (estimate - exact).abs() < 3.0 * se.max(1e-4),
                "oracle {exact} vs Monte-Carlo {estimate} (se {se})"
            );
        }
    }

    #[test]
    fn full_size_crop_is_identity() {
        let ds = generate(&small_cfg(), 1).unwrap();
        let s = &ds.samples[0];
        let c = central_crop(s, 16).unwrap();
        assert_eq!(c.image.data(), s.image.data());
        assert_eq!(c.meta.center, s.meta.center);
    }

    #[test]
    fn central_crop_keeps_center_pixel() {
        let ds = generate(&small_cfg(), 1).unwrap();
        let s = &ds.samples[0];
        let c = central_crop(s, 8).unwrap();
        // Pixel (8, 8) of the 16px image lands at (4, 4) of the 8px crop.
        assert_eq!(
            s.image.data()[8 * 16 + 8],
            c.image.data()[4 * 8 + 4],
            "center pixel moved"
        );
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let ds = generate(&small_cfg(), 1).unwrap();
        assert!(central_crop(&ds.samples[0], 17).is_err());
    }

    #[test]
    fn crops_remain_binary() {
        let ds = generate(&small_cfg(), 4).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for s in &ds.samples {
            let c = random_crop(s, 8, &mut rng).unwrap();
            for m in &c.masks {
                assert!(m.data().iter().all(|v| *v == 0.0 || *v == 1.0));
            }
        }
    }

    #[test]
    fn random_crop_corners_are_uniform() {
        // 12px image, 4px crop -> 9x9 corner cells, 1e4 draws.
        // Chi-squared critical value for df = 80 at the 1% level.
        const CHI2_CRIT_DF80_P99: f64 = 112.329;
        let cfg = SynthConfig {
            image_size: 12,
            lesion_radius_range: (2.0, 2.5),
            ..small_cfg()
        };
        let ds = generate(&cfg, 1).unwrap();
        let s = &ds.samples[0];
        let mut rng = ChaCha12Rng::seed_from_u64(2024);
        let mut counts = vec![0usize; 81];
        let n = 10_000;
        for _ in 0..n {
            let c = random_crop(s, 4, &mut rng).unwrap();
            let y0 = (s.meta.center.0 - c.meta.center.0).round() as usize;
            let x0 = (s.meta.center.1 - c.meta.center.1).round() as usize;
            counts[y0 * 9 + x0] += 1;
        }
        let expected = n as f64 / 81.0;
        let chi2: f64 = counts
            .iter()
            .map(|c| {
                let d = *c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(
            chi2 < CHI2_CRIT_DF80_P99,
            "corner distribution fails chi-squared: {chi2}"
        );
    }

    #[test]
    fn dataset_roundtrip_is_bit_exact() {
        let ds = generate(&small_cfg(), 6).unwrap();
        let dir = tempdir().unwrap();
        write_dataset(&ds, dir.path(), None).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.config, ds.config);
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.image.data(), b.image.data());
            assert_eq!(a.meta, b.meta);
            for (ma, mb) in a.masks.iter().zip(&b.masks) {
                assert_eq!(ma.data(), mb.data());
            }
        }
    }

    #[test]
    fn truncated_blob_is_a_distinct_error() {
        let ds = generate(&small_cfg(), 3).unwrap();
        let dir = tempdir().unwrap();
        write_dataset(&ds, dir.path(), None).unwrap();
        let blob_path = dir.path().join("data.bin");
        let bytes = std::fs::read(&blob_path).unwrap();
        std::fs::write(&blob_path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(Error::TruncatedBlob { .. })
        ));
    }

    #[test]
    fn corrupt_manifest_is_a_distinct_error() {
        let ds = generate(&small_cfg(), 2).unwrap();
        let dir = tempdir().unwrap();
        write_dataset(&ds, dir.path(), None).unwrap();
        std::fs::write(dir.path().join("manifest.toml"), "not really toml [").unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(Error::CorruptHeader { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_a_distinct_error() {
        let ds = generate(&small_cfg(), 2).unwrap();
        let dir = tempdir().unwrap();
        write_dataset(&ds, dir.path(), None).unwrap();
        let manifest_path = dir.path().join("manifest.toml");
        let text = std::fs::read_to_string(&manifest_path).unwrap();
        std::fs::write(&manifest_path, text.replace("version = 1", "version = 9")).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn meta_reconstruction_reproduces_masks() {
        // generate -> write -> read -> rebuild disks from meta is lossless.
        let cfg = small_cfg();
        let ds = generate(&cfg, 4).unwrap();
        let dir = tempdir().unwrap();
        write_dataset(&ds, dir.path(), None).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        for s in &back.samples {
            for k in 0..ANNOTATORS {
                let expected = if s.meta.annotator_empty[k] {
                    vec![0.0f32; 16 * 16]
                } else {
                    disk_mask(16, 16, s.meta.center, s.meta.radius + cfg.boundary_jitter[k])
                };
                assert_eq!(s.masks[k].data(), expected.as_slice());
            }
        }
    }
}
