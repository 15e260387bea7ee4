use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::image::{ToyImage, PIXELS, SIDE};

pub const BACKGROUND: f64 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disc,
    Square,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Disc => "disc",
            Shape::Square => "square",
        }
    }
}

/// Editable scalar of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Brightness,
    Radius,
}

/// One labelled shape image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: ToyImage,
    /// Object pixels.
    pub mask: Vec<bool>,
    pub shape: Shape,
    /// In [0, 1]; object intensity is `−0.6 + 1.6·b`.
    pub brightness: f64,
    /// Disc radius or square half-side, in pixels.
    pub radius: f64,
    pub center: (f64, f64),
}

impl Sample {
    pub fn render(shape: Shape, brightness: f64, radius: f64, center: (f64, f64)) -> Result<Self> {
        if !(0.0..=1.0).contains(&brightness) || !(radius > 0.0) {
            return Err(Error::contract(format!("bad shape labels b={brightness} r={radius}")));
        }
        let value = -0.6 + 1.6 * brightness;
        let mut data = vec![BACKGROUND; PIXELS];
        let mut mask = vec![false; PIXELS];
        for y in 0..SIDE {
            for x in 0..SIDE {
                let (dx, dy) = (x as f64 + 0.5 - center.0, y as f64 + 0.5 - center.1);
                let inside = match shape {
                    Shape::Disc => dx * dx + dy * dy <= radius * radius,
                    Shape::Square => dx.abs() <= radius && dy.abs() <= radius,
                };
                if inside {
                    data[y * SIDE + x] = value;
                    mask[y * SIDE + x] = true;
                }
            }
        }
        Ok(Self {
            image: ToyImage::new(data)?,
            mask,
            shape,
            brightness,
            radius,
            center,
        })
    }

    pub fn size_word(&self) -> &'static str {
        if self.radius < 6.0 {
            "small"
        } else {
            "large"
        }
    }

    pub fn brightness_word(&self) -> &'static str {
        brightness_word(self.brightness)
    }

    /// Same geometry, new brightness.
    pub fn with_brightness(&self, b: f64) -> Result<Self> {
        Self::render(self.shape, b, self.radius, self.center)
    }

    pub fn with_radius(&self, r: f64) -> Result<Self> {
        Self::render(self.shape, self.brightness, r, self.center)
    }
}

pub fn brightness_word(b: f64) -> &'static str {
    if b < 1.0 / 3.0 {
        "dim"
    } else if b < 2.0 / 3.0 {
        "grey"
    } else {
        "bright"
    }
}

/// Deterministic generator of labelled shape images. Sample `i` of a split
/// depends only on `(seed, split, i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub split: Split,
    pub len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    HeldOut,
}

impl SyntheticDataset {
    pub fn new(seed: u64, split: Split, len: usize) -> Self {
        Self { seed, split, len }
    }

    fn sample_rng(&self, i: usize) -> Rng {
        let salt = match self.split {
            Split::Train => 0x7261_696e,
            Split::HeldOut => 0x6865_6c64,
        };
        let mut z = self.seed ^ salt ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        // splitmix64 finaliser
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Rng::new(z ^ (z >> 31))
    }

    pub fn sample(&self, i: usize) -> Result<Sample> {
        if i >= self.len {
            return Err(Error::contract(format!("sample {i} out of range for {} samples", self.len)));
        }
        let mut r = self.sample_rng(i);
        let shape = if r.below(2) == 0 { Shape::Disc } else { Shape::Square };
        let radius = r.uniform(4.0, 8.0);
        let lo = radius + 1.0;
        let hi = SIDE as f64 - radius - 1.0;
        let center = (r.uniform(lo, hi), r.uniform(lo, hi));
        let brightness = r.uniform(0.0, 1.0);
        Sample::render(shape, brightness, radius, center)
    }

    pub fn samples(&self) -> Result<Vec<Sample>> {
        (0..self.len).map(|i| self.sample(i)).collect()
    }

    pub fn images(&self) -> Result<Vec<ToyImage>> {
        (0..self.len).map(|i| Ok(self.sample(i)?.image)).collect()
    }

    /// `(source, target)` pairs differing only in `attr`. Brightness pairs
    /// map a source in [0, 1 − shift] to source + shift; radius pairs grow
    /// the shape by `shift` pixels from a source radius in [4, 6].
    pub fn pairs(&self, attr: Attribute, shift: f64) -> Result<Vec<(Sample, Sample)>> {
        if self.len == 0 {
            return Err(Error::contract("edit pairs need a nonempty dataset"));
        }
        if !(shift > 0.0) {
            return Err(Error::contract(format!("attribute shift must be positive, got {shift}")));
        }
        (0..self.len)
            .map(|i| {
                let s = self.sample(i)?;
                match attr {
                    Attribute::Brightness => {
                        if shift >= 1.0 {
                            return Err(Error::contract("brightness shift must be below 1"));
                        }
                        let src = s.with_brightness(s.brightness * (1.0 - shift))?;
                        let tgt = src.with_brightness((src.brightness + shift).min(1.0))?;
                        Ok((src, tgt))
                    }
                    Attribute::Radius => {
                        let r0 = 4.0 + (s.radius - 4.0) / 2.0;
                        let c = (SIDE as f64 / 2.0, SIDE as f64 / 2.0);
                        let src = Sample::render(s.shape, s.brightness, r0, c)?;
                        let tgt = src.with_radius(r0 + shift)?;
                        Ok((src, tgt))
                    }
                }
            })
            .collect()
    }
}

/// Mean intensity over the masked pixels.
pub fn brightness_probe(img: &ToyImage, mask: &[bool]) -> Result<f64> {
    masked_mean(img.data(), mask, |v| v)
}

/// Radius estimate from the area of pixels brighter than the midpoint
/// between background and the darkest object value.
pub fn radius_probe(img: &ToyImage) -> f64 {
    let area = img.data().iter().filter(|&&v| v > -0.8).count() as f64;
    (area / std::f64::consts::PI).sqrt()
}

/// Mean absolute difference over pixels where `mask` is false.
pub fn background_mae(a: &ToyImage, b: &ToyImage, mask: &[bool]) -> Result<f64> {
    let inv: Vec<bool> = mask.iter().map(|m| !m).collect();
    let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).collect();
    masked_mean(&diff, &inv, |v| v)
}

fn masked_mean(data: &[f64], mask: &[bool], f: impl Fn(f64) -> f64) -> Result<f64> {
    if mask.len() != data.len() {
        return Err(Error::dim("mask", &[mask.len()], &[data.len()]));
    }
    let (mut s, mut n) = (0.0, 0usize);
    for (&v, &m) in data.iter().zip(mask) {
        if m {
            s += f(v);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::contract("mask selects no pixels"));
    }
    Ok(s / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_split_dependent() {
        let a = SyntheticDataset::new(5, Split::Train, 8);
        let b = SyntheticDataset::new(5, Split::Train, 8);
        let h = SyntheticDataset::new(5, Split::HeldOut, 8);
        assert_eq!(a.samples().unwrap(), b.samples().unwrap());
        assert_ne!(a.sample(0).unwrap().image, h.sample(0).unwrap().image);
        assert!(a.sample(8).is_err());
    }

    #[test]
    fn rendering_labels_hold() {
        for s in SyntheticDataset::new(1, Split::Train, 50).samples().unwrap() {
            let v = -0.6 + 1.6 * s.brightness;
            for (p, &m) in s.image.data().iter().zip(&s.mask) {
                assert_eq!(*p, if m { v } else { BACKGROUND });
            }
            let area = s.mask.iter().filter(|&&m| m).count() as f64;
            let expect = match s.shape {
                Shape::Disc => std::f64::consts::PI * s.radius * s.radius,
                Shape::Square => 4.0 * s.radius * s.radius,
            };
            assert!((area - expect).abs() < 0.35 * expect, "{area} vs {expect}");
            assert!((brightness_probe(&s.image, &s.mask).unwrap() - v).abs() < 1e-12);
        }
    }

    #[test]
    fn brightness_pairs_share_geometry() {
        let pairs = SyntheticDataset::new(2, Split::Train, 20).pairs(Attribute::Brightness, 0.5).unwrap();
        for (s, t) in &pairs {
            assert_eq!(s.mask, t.mask);
            assert!((t.brightness - s.brightness - 0.5).abs() < 1e-12);
            assert!(t.brightness <= 1.0);
            assert_eq!(background_mae(&s.image, &t.image, &s.mask).unwrap(), 0.0);
            let gain = brightness_probe(&t.image, &t.mask).unwrap() - brightness_probe(&s.image, &s.mask).unwrap();
            assert!((gain - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn radius_pairs_grow() {
        let pairs = SyntheticDataset::new(2, Split::Train, 10).pairs(Attribute::Radius, 2.0).unwrap();
        for (s, t) in &pairs {
            assert!(radius_probe(&t.image) > radius_probe(&s.image));
        }
    }

    #[test]
    fn pair_errors() {
        let d = SyntheticDataset::new(2, Split::Train, 0);
        assert!(d.pairs(Attribute::Brightness, 0.5).is_err());
        let d = SyntheticDataset::new(2, Split::Train, 3);
        assert!(d.pairs(Attribute::Brightness, 0.0).is_err());
        assert!(d.pairs(Attribute::Brightness, 1.0).is_err());
    }

    #[test]
    fn words() {
        let s = Sample::render(Shape::Disc, 0.9, 4.5, (16.0, 16.0)).unwrap();
        assert_eq!((s.brightness_word(), s.size_word(), s.shape.name()), ("bright", "small", "disc"));
    }
}
