//! sRGB to CIELAB conversion against the D65 reference white.
//!
//! Superpixel clustering runs in Lab so that perceptual color distance is
//! roughly Euclidean; the generator also emits Lab channels as part of its
//! per-pixel features.

use crate::error::{Result, RptError};
use crate::tensor::{FeatureMap, Image};

// D65 reference white in XYZ: exactly the row sums of the RGB -> XYZ
// matrix below, so pure grays land exactly on the achromatic axis and
// white maps to L = 100 with no residual from truncated constants.
const XN: f64 = 0.4124564 + 0.3575761 + 0.1804375;
const YN: f64 = 0.2126729 + 0.7151522 + 0.0721750;
const ZN: f64 = 0.0193339 + 0.1191920 + 0.9503041;

#[inline]
fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// Converts one sRGB triple (components in `[0, 1]`) to `(L*, a*, b*)`.
pub fn srgb_to_lab(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let rl = srgb_to_linear(r);
    let gl = srgb_to_linear(g);
    let bl = srgb_to_linear(b);
    // sRGB (IEC 61966-2-1) linear RGB -> XYZ under D65.
    let x = 0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl;
    let y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl;
    let z = 0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl;
    let fx = lab_f(x / XN);
    let fy = lab_f(y / YN);
    let fz = lab_f(z / ZN);
    (116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

/// Converts a 3-channel RGB image to a 3-channel Lab feature map.
pub fn rgb_to_lab(image: &Image) -> Result<FeatureMap> {
    if image.channels != 3 {
        return Err(RptError::Invalid(format!(
            "rgb_to_lab expects 3 channels, got {}",
            image.channels
        )));
    }
    let mut data = Vec::with_capacity(image.data.len());
    for px in image.data.chunks_exact(3) {
        let (l, a, b) = srgb_to_lab(px[0] as f64, px[1] as f64, px[2] as f64);
        data.push(l as f32);
        data.push(a as f32);
        data.push(b as f32);
    }
    FeatureMap::new(image.height, image.width, 3, data)
}
