use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::resample::{zoom_bilinear, zoom_nearest};
use super::FundusImage;
use crate::raster::{DepthMap, Grid, LabelMap};
use crate::{CoreError, Result};

/// Supervision attached to an image.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Depth(DepthMap),
    Labels(LabelMap),
}

/// One training example. `guide` is the optional depth (or pseudo-depth)
/// map fed to the guide branch of the segmentation network.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: FundusImage,
    pub target: Target,
    pub guide: Option<DepthMap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Outputs per input; the first output is the untouched input.
    pub multiplier: usize,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub zoom_range: (f64, f64),
    /// Noise standard deviation is drawn from `[0, noise_sigma_max]`.
    pub noise_sigma_max: f64,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            multiplier: 10,
            flip_horizontal: true,
            flip_vertical: true,
            zoom_range: (0.9, 1.1),
            noise_sigma_max: 0.05,
            seed: 0,
        }
    }
}

impl Sample {
    fn map_geometry(
        &self,
        image: impl Fn(Grid<f64>) -> Grid<f64>,
        depth: impl Fn(&Grid<f64>) -> Grid<f64>,
        labels: impl Fn(&LabelMap) -> LabelMap,
    ) -> Sample {
        Sample {
            image: self.image.map_channels(image),
            target: match &self.target {
                Target::Depth(d) => Target::Depth(depth(d)),
                Target::Labels(l) => Target::Labels(labels(l)),
            },
            guide: self.guide.as_ref().map(depth),
        }
    }

    pub fn flip_horizontal(&self) -> Sample {
        self.map_geometry(|c| c.flip_horizontal(), Grid::flip_horizontal, Grid::flip_horizontal)
    }

    pub fn flip_vertical(&self) -> Sample {
        self.map_geometry(|c| c.flip_vertical(), Grid::flip_vertical, Grid::flip_vertical)
    }

    /// Zoom about the centre; label targets use nearest-neighbour sampling.
    pub fn zoom(&self, scale: f64) -> Sample {
        self.map_geometry(
            |c| zoom_bilinear(&c, scale),
            |d| zoom_bilinear(d, scale),
            |l| zoom_nearest(l, scale),
        )
    }
}

/// Expand one sample into `policy.multiplier` samples.
///
/// `stream` distinguishes inputs that share a policy so every input gets its
/// own deterministic random sequence.
pub fn augment(sample: &Sample, policy: &AugmentPolicy, stream: u64) -> Result<Vec<Sample>> {
    if policy.multiplier < 1 {
        return Err(CoreError::Config("augmentation multiplier must be at least 1".into()));
    }
    let (zlo, zhi) = policy.zoom_range;
    if !(zlo > 0.0 && zlo <= zhi) || policy.noise_sigma_max < 0.0 {
        return Err(CoreError::Config(format!(
            "invalid zoom range ({zlo}, {zhi}) or noise bound {}",
            policy.noise_sigma_max
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    rng.set_stream(stream);
    let mut out = Vec::with_capacity(policy.multiplier);
    out.push(sample.clone());
    for _ in 1..policy.multiplier {
        let mut s = sample.clone();
        if policy.flip_horizontal && rng.random_bool(0.5) {
            s = s.flip_horizontal();
        }
        if policy.flip_vertical && rng.random_bool(0.5) {
            s = s.flip_vertical();
        }
        let scale = if zhi > zlo { rng.random_range(zlo..=zhi) } else { zlo };
        if scale != 1.0 {
            s = s.zoom(scale);
        }
        let sigma = rng.random_range(0.0..=policy.noise_sigma_max);
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            let pixels = s.image.pixels().iter().map(|v| v + normal.sample(&mut rng)).collect();
            s.image = s.image.with_pixels(pixels);
        }
        out.push(s);
    }
    Ok(out)
}

/// Augment every sample of a split.
pub fn augment_all(samples: &[Sample], policy: &AugmentPolicy) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(samples.len() * policy.multiplier);
    for (i, s) in samples.iter().enumerate() {
        out.extend(augment(s, policy, i as u64)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(seed: usize) -> Sample {
        let plane = 16 * 16;
        let pixels = (0..3 * plane).map(|i| ((i * 31 + seed) % 101) as f64 / 100.0).collect();
        let image = FundusImage::new(16, 16, pixels, format!("s{seed}")).unwrap();
        let labels = Grid::from_fn(16, 16, |y, x| ((y / 4 + x / 5) % 3) as u8);
        Sample {
            image,
            target: Target::Labels(labels),
            guide: Some(Grid::from_fn(16, 16, |y, x| (y * x) as f64 / 225.0)),
        }
    }

    #[test]
    fn multiplier_ten_on_26_samples_gives_260() {
        let samples: Vec<Sample> = (0..26).map(sample).collect();
        let out = augment_all(&samples, &AugmentPolicy::default()).unwrap();
        assert_eq!(out.len(), 260);
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample(3);
        assert_eq!(s.flip_horizontal().flip_horizontal(), s);
        assert_eq!(s.flip_vertical().flip_vertical(), s);
    }

    #[test]
    fn unit_zoom_is_identity() {
        let s = sample(4);
        let z = s.zoom(1.0);
        let err = z
            .image
            .pixels()
            .iter()
            .zip(s.image.pixels())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6);
        assert_eq!(z.target, s.target);
    }

    #[test]
    fn zoomed_labels_stay_in_label_set() {
        let s = sample(5).zoom(1.07);
        let Target::Labels(l) = &s.target else { unreachable!() };
        let original: std::collections::BTreeSet<u8> = match &sample(5).target {
            Target::Labels(l) => l.data().iter().copied().collect(),
            _ => unreachable!(),
        };
        assert!(l.data().iter().all(|v| original.contains(v)));
    }

    #[test]
    fn noise_touches_image_only() {
        let policy = AugmentPolicy {
            multiplier: 4,
            flip_horizontal: false,
            flip_vertical: false,
            zoom_range: (1.0, 1.0),
            noise_sigma_max: 0.05,
            seed: 11,
        };
        let s = sample(6);
        let out = augment(&s, &policy, 0).unwrap();
        for o in &out[1..] {
            assert_eq!(o.target, s.target);
            assert_eq!(o.guide, s.guide);
        }
        assert!(out[1..].iter().any(|o| o.image != s.image));
    }

    #[test]
    fn multiplier_zero_is_rejected() {
        let policy = AugmentPolicy {
            multiplier: 0,
            ..AugmentPolicy::default()
        };
        assert!(augment(&sample(0), &policy, 0).is_err());
    }
}
