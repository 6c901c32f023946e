//! RGB → quaternion embeddings.

use std::fmt;
use std::str::FromStr;

use crate::error::{QuanError, Result};
use crate::quaternion::Quaternion;
use crate::scalar::Real;
use crate::tensor::{QTensor, Shape, Q};

/// Floor on the RGB norm used by the normalizing variants.
pub const NORM_FLOOR: f64 = 1e-12;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum MappingStrategy {
    #[default]
    Poincare,
    Luminance,
    MeanBrightness,
    RawNormalized,
    Hamilton,
}

impl MappingStrategy {
    pub const ALL: [MappingStrategy; 5] = [
        MappingStrategy::Poincare,
        MappingStrategy::Luminance,
        MappingStrategy::MeanBrightness,
        MappingStrategy::RawNormalized,
        MappingStrategy::Hamilton,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MappingStrategy::Poincare => "poincare",
            MappingStrategy::Luminance => "luminance",
            MappingStrategy::MeanBrightness => "mean_brightness",
            MappingStrategy::RawNormalized => "raw_normalized",
            MappingStrategy::Hamilton => "hamilton",
        }
    }
}

impl fmt::Display for MappingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MappingStrategy {
    type Err = QuanError;

    fn from_str(s: &str) -> Result<Self> {
        MappingStrategy::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                QuanError::Config(format!(
                    "unknown mapping '{s}' (expected one of poincare, luminance, mean_brightness, raw_normalized, hamilton)"
                ))
            })
    }
}

fn check_rgb(rgb: [f64; 3]) -> Result<()> {
    if rgb.iter().all(|c| (0.0..=1.0).contains(c)) {
        Ok(())
    } else {
        Err(QuanError::Domain(format!(
            "RGB channels must lie in [0, 1], got {rgb:?}"
        )))
    }
}

/// Stereographic embedding of the RGB cube into the unit quaternion sphere.
pub fn map_rgb_poincare(rgb: [f64; 3]) -> Result<Quaternion> {
    check_rgb(rgb)?;
    let [r, g, b] = rgb;
    let n2 = r * r + g * g + b * b;
    let d = 1.0 + n2;
    Ok(Quaternion::new((1.0 - n2) / d, 2.0 * r / d, 2.0 * g / d, 2.0 * b / d))
}

/// Inverse of [`map_rgb_poincare`] on its image.
pub fn unmap_poincare(q: Quaternion) -> Result<[f64; 3]> {
    if q.r <= -1.0 + 1e-9 {
        return Err(QuanError::Domain(format!(
            "real part {} is outside the Poincaré image",
            q.r
        )));
    }
    if [q.i, q.j, q.k].iter().any(|&c| c < -1e-9) {
        return Err(QuanError::Domain(format!(
            "negative vector part {q:?} is outside the Poincaré image"
        )));
    }
    let n2 = (1.0 - q.r) / (1.0 + q.r);
    let s = 0.5 * (1.0 + n2);
    Ok([q.i * s, q.j * s, q.k * s])
}

fn unit_rgb(rgb: [f64; 3]) -> [f64; 3] {
    let n = (rgb[0] * rgb[0] + rgb[1] * rgb[1] + rgb[2] * rgb[2])
        .sqrt()
        .max(NORM_FLOOR);
    rgb.map(|c| c / n)
}

/// Maps one RGB triple with the chosen strategy.
///
/// The luminance and mean variants take their real part from the raw
/// channels; only the vector part is normalized.
pub fn map_rgb_variant(rgb: [f64; 3], strategy: MappingStrategy) -> Result<Quaternion> {
    check_rgb(rgb)?;
    let q = match strategy {
        MappingStrategy::Poincare => return map_rgb_poincare(rgb),
        MappingStrategy::Hamilton => Quaternion::new(0.0, rgb[0], rgb[1], rgb[2]),
        MappingStrategy::Luminance => {
            let y = LUMA[0] * rgb[0] + LUMA[1] * rgb[1] + LUMA[2] * rgb[2];
            let [i, j, k] = unit_rgb(rgb);
            Quaternion::new(y, i, j, k)
        }
        MappingStrategy::MeanBrightness => {
            let m = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
            let [i, j, k] = unit_rgb(rgb);
            Quaternion::new(m, i, j, k)
        }
        MappingStrategy::RawNormalized => {
            let [i, j, k] = unit_rgb(rgb);
            Quaternion::new(0.0, i, j, k)
        }
    };
    Ok(q)
}

/// Maps an interleaved 8-bit `H × W × 3` image to a `1 × 1 × H × W` quaternion tensor.
pub fn map_image<T: Real>(
    pixels: &[u8],
    height: usize,
    width: usize,
    strategy: MappingStrategy,
) -> Result<QTensor<T>> {
    let mut out = QTensor::zeros(Shape::new(1, 1, height, width));
    map_image_into(pixels, height, width, strategy, out.data_mut())?;
    Ok(out)
}

/// Writes the mapped image into `dst` (`H·W·4` values).
pub fn map_image_into<T: Real>(
    pixels: &[u8],
    height: usize,
    width: usize,
    strategy: MappingStrategy,
    dst: &mut [T],
) -> Result<()> {
    let n = height * width;
    if pixels.len() != n * 3 || dst.len() != n * Q {
        return Err(QuanError::Shape(format!(
            "image buffer of {} bytes does not match {height}x{width}x3",
            pixels.len()
        )));
    }
    for (px, out) in pixels.chunks_exact(3).zip(dst.chunks_exact_mut(Q)) {
        let rgb = [px[0], px[1], px[2]].map(|c| c as f64 / 255.0);
        let q = map_rgb_variant(rgb, strategy)?;
        for (o, v) in out.iter_mut().zip(q.to_array()) {
            *o = T::from_f64(v);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rgb(rng: &mut ChaCha8Rng) -> [f64; 3] {
        [rng.random(), rng.random(), rng.random()]
    }

    #[test]
    fn poincare_examples() {
        assert_eq!(map_rgb_poincare([0.0; 3]).unwrap(), Quaternion::IDENTITY);
        assert_eq!(
            map_rgb_poincare([1.0; 3]).unwrap(),
            Quaternion::new(-0.5, 0.5, 0.5, 0.5)
        );
        assert!(map_rgb_poincare([1.2, 0.0, 0.0]).is_err());
        assert!(map_rgb_poincare([0.0, -0.1, 0.0]).is_err());
    }

    #[test]
    fn poincare_is_unit_and_invertible() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let rgb = random_rgb(&mut rng);
            let q = map_rgb_poincare(rgb).unwrap();
            assert!((q.norm() - 1.0).abs() < 1e-6);
            let back = unmap_poincare(q).unwrap();
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn unmap_examples() {
        assert_eq!(unmap_poincare(Quaternion::IDENTITY).unwrap(), [0.0; 3]);
        let rgb = unmap_poincare(Quaternion::new(-0.5, 0.5, 0.5, 0.5)).unwrap();
        assert_eq!(rgb, [1.0; 3]);
        assert!(unmap_poincare(Quaternion::new(-1.0, 0.0, 0.0, 0.0)).is_err());
        assert!(unmap_poincare(Quaternion::new(0.5, -0.1, 0.0, 0.0)).is_err());
    }

    #[test]
    fn poincare_is_injective_on_grid() {
        let steps = 17;
        let pts: Vec<Quaternion> = (0..steps * steps * steps)
            .map(|n| {
                let c = [n % steps, (n / steps) % steps, n / (steps * steps)];
                map_rgb_poincare(c.map(|v| v as f64 / (steps - 1) as f64)).unwrap()
            })
            .collect();
        let mut min_dist = f64::INFINITY;
        for a in 0..pts.len() {
            for b in a + 1..pts.len() {
                min_dist = min_dist.min((pts[a] - pts[b]).norm());
            }
        }
        assert!(min_dist > 0.0);
    }

    #[test]
    fn variant_examples() {
        let h = map_rgb_variant([0.2, 0.4, 0.6], MappingStrategy::Hamilton).unwrap();
        assert_eq!(h, Quaternion::new(0.0, 0.2, 0.4, 0.6));
        let l = map_rgb_variant([1.0, 0.0, 0.0], MappingStrategy::Luminance).unwrap();
        assert_eq!(l.r, 0.299);
        assert_eq!((l.i, l.j, l.k), (1.0, 0.0, 0.0));
        let m = map_rgb_variant([0.3; 3], MappingStrategy::MeanBrightness).unwrap();
        assert!((m.r - 0.3).abs() < 1e-15);
        let raw = map_rgb_variant([0.0, 0.3, 0.4], MappingStrategy::RawNormalized).unwrap();
        assert_eq!(raw.r, 0.0);
        assert!((raw.j - 0.6).abs() < 1e-12 && (raw.k - 0.8).abs() < 1e-12);
        // Black stays finite under normalization.
        let black = map_rgb_variant([0.0; 3], MappingStrategy::Luminance).unwrap();
        assert_eq!(black, Quaternion::default());
        assert!(map_rgb_variant([0.0, 2.0, 0.0], MappingStrategy::Hamilton).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for m in MappingStrategy::ALL {
            assert_eq!(m.name().parse::<MappingStrategy>().unwrap(), m);
        }
        assert!("hsv".parse::<MappingStrategy>().is_err());
    }

    #[test]
    fn image_mapping_scales_bytes() {
        let px = [0u8, 0, 0, 255, 255, 255];
        let t: QTensor<f64> = map_image(&px, 1, 2, MappingStrategy::Poincare).unwrap();
        assert_eq!(t.quaternion(0, 0, 0, 0), Quaternion::IDENTITY);
        assert_eq!(t.quaternion(0, 0, 0, 1), Quaternion::new(-0.5, 0.5, 0.5, 0.5));
        let hm: QTensor<f64> = map_image(&[51, 102, 153], 1, 1, MappingStrategy::Hamilton).unwrap();
        assert_eq!(hm.quaternion(0, 0, 0, 0), Quaternion::new(0.0, 0.2, 0.4, 0.6));
        assert!(map_image::<f32>(&px, 2, 2, MappingStrategy::Poincare).is_err());
    }
}
