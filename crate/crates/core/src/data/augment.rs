//! Random crop with reflection padding and horizontal flip.

use rand::Rng;

use super::ImageRecord;
use crate::error::{QuanError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub crop_pad: usize,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_pad: 4,
            flip_prob: 0.5,
        }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

/// Pads by `pad` pixels with reflection, then crops back to the original size
/// at a uniformly random offset.
pub fn random_crop<R: Rng + ?Sized>(img: &ImageRecord, pad: usize, rng: &mut R) -> Result<ImageRecord> {
    if pad >= img.height || pad >= img.width {
        return Err(QuanError::Range(format!(
            "crop padding {pad} must be smaller than the {}x{} image",
            img.height, img.width
        )));
    }
    if pad == 0 {
        return Ok(img.clone());
    }
    let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height {
        let sy = reflect(y as isize + dy, img.height);
        for x in 0..img.width {
            let sx = reflect(x as isize + dx, img.width);
            pixels.extend_from_slice(&img.pixel(sy, sx));
        }
    }
    Ok(ImageRecord { pixels, ..img.clone() })
}

pub fn horizontal_flip(img: &ImageRecord) -> ImageRecord {
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height {
        for x in (0..img.width).rev() {
            pixels.extend_from_slice(&img.pixel(y, x));
        }
    }
    ImageRecord { pixels, ..img.clone() }
}

/// Crop, then flip with probability `flip_prob`. The label is unchanged.
pub fn augment<R: Rng + ?Sized>(img: &ImageRecord, cfg: &AugmentConfig, rng: &mut R) -> Result<ImageRecord> {
    let out = random_crop(img, cfg.crop_pad, rng)?;
    if cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob.min(1.0)) {
        return Ok(horizontal_flip(&out));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp() -> ImageRecord {
        ImageRecord::new(4, 5, (0..60).collect(), 7).unwrap()
    }

    #[test]
    fn identities() {
        let img = ramp();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let no_flip = AugmentConfig {
            crop_pad: 0,
            flip_prob: 0.0,
        };
        assert_eq!(augment(&img, &no_flip, &mut rng).unwrap(), img);
        assert_eq!(random_crop(&img, 0, &mut rng).unwrap(), img);
        let always = AugmentConfig {
            crop_pad: 0,
            flip_prob: 1.0,
        };
        let once = augment(&img, &always, &mut rng).unwrap();
        assert_ne!(once, img);
        assert_eq!(augment(&once, &always, &mut rng).unwrap(), img);
    }

    #[test]
    fn crop_reflects_and_keeps_label() {
        let img = ramp();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let c = random_crop(&img, 2, &mut rng).unwrap();
            assert_eq!((c.height, c.width, c.label), (4, 5, 7));
            // Every output pixel is some input pixel.
            assert!(c.pixels.chunks(3).all(|p| img.pixels.chunks(3).any(|q| q == p)));
        }
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(4, 4), 2);
        assert!(matches!(random_crop(&img, 4, &mut rng), Err(QuanError::Range(_))));
    }
}
