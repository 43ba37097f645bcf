//! Local feature maps taking a gray-scale value to a length-2 vector.
//!
//! An image becomes a chain of such vectors in raster order. The product
//! state they describe is never materialized; the contraction engine consumes
//! the chain one site at a time.

use std::fmt;
use std::str::FromStr;

use crate::error::{FttnError, Result};

/// Dimension of every local feature vector.
pub const LOCAL_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureMap {
    /// `[1 - p, p]`
    #[default]
    Linear,
    /// `[cos(pi p / 2), sin(pi p / 2)]`
    Trig,
}

impl FeatureMap {
    pub fn name(self) -> &'static str {
        match self {
            FeatureMap::Linear => "linear",
            FeatureMap::Trig => "trig",
        }
    }
}

impl fmt::Display for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureMap {
    type Err = FttnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(FeatureMap::Linear),
            "trig" => Ok(FeatureMap::Trig),
            other => Err(FttnError::InvalidArgument(format!(
                "unknown feature map {other:?} (expected linear or trig)"
            ))),
        }
    }
}

pub fn embed_pixel(p: f64, kind: FeatureMap) -> Result<[f64; LOCAL_DIM]> {
    if !(0.0..=1.0).contains(&p) {
        return Err(FttnError::Domain(format!("pixel value {p} outside [0, 1]")));
    }
    Ok(match kind {
        FeatureMap::Linear => [1.0 - p, p],
        FeatureMap::Trig => {
            let angle = std::f64::consts::FRAC_PI_2 * p;
            [angle.cos(), angle.sin()]
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedImage {
    sites: Vec<[f64; LOCAL_DIM]>,
}

impl EmbeddedImage {
    pub fn sites(&self) -> &[[f64; LOCAL_DIM]] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// Chain built from arbitrary site vectors, bypassing the pixel maps.
    pub fn from_sites(sites: Vec<[f64; LOCAL_DIM]>) -> Result<Self> {
        if sites.iter().flatten().any(|v| !v.is_finite()) {
            return Err(FttnError::NonFinite("feature vector entry".into()));
        }
        Ok(EmbeddedImage { sites })
    }
}

/// Embeds a row-major `height x width` image.
pub fn embed_image(pixels: &[f64], height: usize, width: usize, kind: FeatureMap) -> Result<EmbeddedImage> {
    if pixels.len() != height * width {
        return Err(FttnError::DimensionMismatch(format!(
            "{height}x{width} image needs {} pixels, got {}",
            height * width,
            pixels.len()
        )));
    }
    embed_pixels(pixels, kind)
}

/// Embeds an already flattened pixel chain.
pub fn embed_pixels(pixels: &[f64], kind: FeatureMap) -> Result<EmbeddedImage> {
    let sites = pixels
        .iter()
        .map(|&p| embed_pixel(p, kind))
        .collect::<Result<Vec<_>>>()?;
    Ok(EmbeddedImage { sites })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_and_midpoint_values() {
        assert_eq!(embed_pixel(0.0, FeatureMap::Linear).unwrap(), [1.0, 0.0]);
        assert_eq!(embed_pixel(0.5, FeatureMap::Linear).unwrap(), [0.5, 0.5]);
        let v = embed_pixel(1.0, FeatureMap::Trig).unwrap();
        let half_pi = std::f64::consts::FRAC_PI_2;
        assert_eq!(v, [half_pi.cos(), half_pi.sin()]);
        assert!(v[0].abs() < 1e-16 && v[1] == 1.0);
    }

    #[test]
    fn out_of_range_pixels_fail() {
        for p in [-0.01, 1.01, f64::NAN] {
            assert!(matches!(embed_pixel(p, FeatureMap::Linear), Err(FttnError::Domain(_))));
        }
        assert!(embed_image(&[0.0, 2.0], 1, 2, FeatureMap::Trig).is_err());
        assert!(embed_image(&[0.0; 3], 2, 2, FeatureMap::Trig).is_err());
    }

    #[test]
    fn uniform_images() {
        let black = embed_image(&[0.0; 4], 2, 2, FeatureMap::Linear).unwrap();
        assert_eq!(black.sites(), &[[1.0, 0.0]; 4]);
        let white = embed_image(&[1.0; 4], 2, 2, FeatureMap::Trig).unwrap();
        for s in white.sites() {
            assert!(s[0].abs() < 1e-16);
            assert_eq!(s[1], 1.0);
        }
    }

    #[test]
    fn grid_invariants() {
        for k in 0..=100 {
            let p = k as f64 * 0.01;
            let lin = embed_pixel(p, FeatureMap::Linear).unwrap();
            assert!((lin[0] + lin[1] - 1.0).abs() <= 1e-15);
            assert!(lin.iter().all(|v| (0.0..=1.0).contains(v)));
            let trig = embed_pixel(p, FeatureMap::Trig).unwrap();
            assert!((trig[0].hypot(trig[1]) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn raster_order_is_kept() {
        let pixels: Vec<f64> = (0..12).map(|k| k as f64 / 11.0).collect();
        let img = embed_image(&pixels, 3, 4, FeatureMap::Trig).unwrap();
        for (k, &p) in pixels.iter().enumerate() {
            assert_eq!(img.sites()[k], embed_pixel(p, FeatureMap::Trig).unwrap());
        }
    }

    #[test]
    fn parse_names() {
        assert_eq!("trig".parse::<FeatureMap>().unwrap(), FeatureMap::Trig);
        assert_eq!(FeatureMap::Linear.to_string(), "linear");
        assert!("cosine".parse::<FeatureMap>().is_err());
    }
}
