//! Image datasets: NPZ archives in the MedMNIST layout, a synthetic
//! texture fixture, normalization and stratified splitting.

pub mod npy;
mod npz;

pub use npz::{load_npz_dataset, write_npz_dataset, NPZ_KEYS};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// `N × H × W × Ch` 8-bit images with one class label each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub images: Vec<u8>,
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Vec<u8>,
        labels: Vec<usize>,
        (height, width, channels): (usize, usize, usize),
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if height < 8 || width < 8 {
            return Err(Error::format(format!(
                "images must be at least 8x8, got {height}x{width}"
            )));
        }
        if channels == 0 {
            return Err(Error::format("images need at least one channel"));
        }
        if images.len() != labels.len() * height * width * channels {
            return Err(Error::format(format!(
                "{} pixel values do not match {} images of {height}x{width}x{channels}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::format(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            images,
            labels,
            height,
            width,
            channels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// New dataset holding the given images, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..*self
        }
    }
}

/// `H × W × Ch` image with values in `[0, 1]`, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl FloatImage {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width}x{channels} image",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + ch]
    }
}

/// Scales every pixel to `[0, 1]` by dividing by 255.
pub fn normalize(d: &Dataset) -> Vec<FloatImage> {
    (0..d.len())
        .map(|i| FloatImage {
            height: d.height,
            width: d.width,
            channels: d.channels,
            pixels: d.image(i).iter().map(|&p| p as f64 / 255.0).collect(),
        })
        .collect()
}

const TEXTURE_LOW: f64 = 48.0;
const TEXTURE_HIGH: f64 = 208.0;
const TEXTURE_PERIOD: usize = 4;

/// Two-class grayscale texture fixture.
///
/// Class 0 is vertical stripes and class 1 a checkerboard, both with a
/// 4-pixel period and a random phase per image, plus Gaussian noise of
/// standard deviation `noise` (in 8-bit units) clipped to `[0, 255]`.
/// Images are emitted class by class.
pub fn synth_textures(n_per_class: usize, side: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if side < 8 {
        return Err(Error::config(format!("texture side must be >= 8, got {side}")));
    }
    if !(noise >= 0.0) {
        return Err(Error::config(format!("noise must be >= 0, got {noise}")));
    }
    let mut rng = seed::rng(seed);
    let gauss = Normal::new(0.0, noise).map_err(|e| Error::config(e.to_string()))?;
    let half = TEXTURE_PERIOD / 2;
    let mut images = Vec::with_capacity(2 * n_per_class * side * side);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for class in 0..2 {
        for _ in 0..n_per_class {
            let dx = rand::Rng::random_range(&mut rng, 0..TEXTURE_PERIOD);
            let dy = rand::Rng::random_range(&mut rng, 0..TEXTURE_PERIOD);
            for y in 0..side {
                for x in 0..side {
                    let col_on = (x + dx) % TEXTURE_PERIOD < half;
                    let on = if class == 0 {
                        col_on
                    } else {
                        col_on ^ ((y + dy) % TEXTURE_PERIOD < half)
                    };
                    let base = if on { TEXTURE_HIGH } else { TEXTURE_LOW };
                    let v = if noise > 0.0 {
                        base + gauss.sample(&mut rng)
                    } else {
                        base
                    };
                    images.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
            labels.push(class);
        }
    }
    Dataset::new(images, labels, (side, side, 1), 2, Split::Train)
}

/// Splits `d` so that each class is divided according to `fractions`.
///
/// Per class, the shuffled members are cut into consecutive chunks whose
/// sizes are the floors of `n_c · f_k`, with the remainder going to the
/// parts with the largest fractional parts. Within each part the original
/// image order is kept.
pub fn stratified_split(d: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f >= 0.0)) {
        return Err(Error::config("split fractions must be non-negative"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split fractions sum to {total}, not 1")));
    }
    let counts = d.class_counts();
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 && n < fractions.len() {
            return Err(Error::DegenerateClass(format!(
                "class {c} has {n} samples, fewer than {} splits",
                fractions.len()
            )));
        }
    }

    let mut rng = seed::rng(seed);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    for class in 0..d.num_classes {
        let mut members: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == class).collect();
        members.shuffle(&mut rng);
        let sizes = apportion(members.len(), fractions);
        let mut offset = 0;
        for (part, size) in parts.iter_mut().zip(sizes) {
            part.extend_from_slice(&members[offset..offset + size]);
            offset += size;
        }
    }
    Ok(parts
        .into_iter()
        .map(|mut idx| {
            idx.sort_unstable();
            d.select(&idx)
        })
        .collect())
}

/// Largest-remainder apportionment of `n` items.
fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut leftover = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        sizes[k] += 1;
        leftover -= 1;
    }
    sizes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let mut px = vec![0u8; 128];
        px[1] = 255;
        px[2] = 51;
        let d = Dataset::new(
            px,
            vec![0, 1],
            (8, 8, 1),
            2,
            Split::Train,
        )
        .unwrap();
        let f = normalize(&d);
        assert_eq!(f.len(), 2);
        assert_eq!(f[0].pixels[0], 0.0);
        assert_eq!(f[0].pixels[1], 1.0);
        assert_eq!(f[0].pixels[2], 0.2);
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_textures(100, 16, 10.0, 9).unwrap();
        let b = synth_textures(100, 16, 10.0, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 200);
        assert_eq!(a.class_counts(), vec![100, 100]);
        assert_ne!(a, synth_textures(100, 16, 10.0, 10).unwrap());
    }

    #[test]
    fn noiseless_stripes_alternate_columns() {
        let d = synth_textures(3, 12, 0.0, 1).unwrap();
        let side = 12;
        for i in 0..3 {
            let img = d.image(i);
            let col = |x: usize| (0..side).map(|y| img[y * side + x]).collect::<Vec<_>>();
            let values: std::collections::BTreeSet<u8> = img.iter().copied().collect();
            assert_eq!(values.len(), 2);
            for x in 0..side {
                let c = col(x);
                assert!(c.iter().all(|&v| v == c[0]), "column {x} constant");
            }
        }
        // Checkerboard rows are not constant down a column.
        let img = d.image(3);
        assert_ne!(img[0], img[2 * side]);
    }

    #[test]
    fn synth_rejects_small_side() {
        assert!(synth_textures(1, 7, 0.0, 0).is_err());
    }

    #[test]
    fn split_preserves_class_proportions() {
        let d = synth_textures(50, 8, 0.0, 3).unwrap();
        let parts = stratified_split(&d, &[0.8, 0.2], 11).unwrap();
        assert_eq!(parts[0].len(), 80);
        assert_eq!(parts[1].len(), 20);
        assert_eq!(parts[0].class_counts(), vec![40, 40]);
        assert_eq!(parts[1].class_counts(), vec![10, 10]);
        let again = stratified_split(&d, &[0.8, 0.2], 11).unwrap();
        assert_eq!(parts, again);
    }

    #[test]
    fn split_rejects_bad_fractions_and_tiny_classes() {
        let d = synth_textures(2, 8, 0.0, 3).unwrap();
        assert!(matches!(
            stratified_split(&d, &[0.5, 0.6], 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            stratified_split(&d, &[0.4, 0.3, 0.3], 0),
            Err(Error::DegenerateClass(_))
        ));
    }

    #[test]
    fn apportion_within_one() {
        for n in 3..40 {
            let sizes = apportion(n, &[0.7, 0.15, 0.15]);
            assert_eq!(sizes.iter().sum::<usize>(), n);
            for (s, f) in sizes.iter().zip([0.7, 0.15, 0.15]) {
                assert!((*s as f64 - f * n as f64).abs() <= 1.0);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn normalize_preserves_order(a in 0u8..=255, b in 0u8..=255) {
            let mut px = vec![0u8; 64];
            px[0] = a;
            px[1] = b;
            let d = Dataset::new(px, vec![0], (8, 8, 1), 1, Split::Train).unwrap();
            let f = &normalize(&d)[0];
            proptest::prop_assert_eq!(a.cmp(&b), f.pixels[0].partial_cmp(&f.pixels[1]).unwrap());
        }
    }
}
