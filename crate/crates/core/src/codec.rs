//! Profile-to-image encoding.
//!
//! Each kW reading maps to a point on a piecewise-linear color curve
//! green → blue → red → black with breakpoints `l1 = l3/3`, `l2 = 2·l3/3`
//! and `l3`; temperature becomes a fourth channel `T / T_max`. All channels
//! are then mapped from `[0, 1]` to `[-1, 1]`. Decoding projects a color onto
//! the nearest curve point, so generator outputs that are slightly off the
//! curve still decode deterministically.

use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const CHANNELS: usize = 4;
/// Colors farther than this from the curve are counted as off-curve.
pub const OFF_CURVE_FLAG: f64 = 0.25;

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("negative or non-finite power {value} at row {m}, column {n}")]
    BadPower { m: usize, n: usize, value: f64 },
    #[error("invalid encoding levels: {0}")]
    BadLevels(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("png: {0}")]
    Png(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodingLevels {
    /// Saturation level in kW.
    pub l3: f64,
    /// Temperature ceiling in °F.
    pub t_max: f64,
}

impl Default for EncodingLevels {
    fn default() -> Self {
        Self { l3: 6.0, t_max: 120.0 }
    }
}

impl EncodingLevels {
    pub fn new(l3: f64, t_max: f64) -> Result<Self, CodecError> {
        let levels = Self { l3, t_max };
        levels.validate()?;
        Ok(levels)
    }

    /// Levels whose saturation is the largest reading of `kw`.
    pub fn per_matrix(kw: &[f64], t_max: f64) -> Result<Self, CodecError> {
        let l3 = kw.iter().copied().fold(0.0, f64::max);
        Self::new(l3, t_max)
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if !(self.l3.is_finite() && self.l3 > 0.0 && self.t_max.is_finite() && self.t_max > 0.0) {
            return Err(CodecError::BadLevels(format!("need l3 > 0 and t_max > 0, got {self:?}")));
        }
        Ok(())
    }

    pub fn l1(&self) -> f64 {
        self.l3 / 3.0
    }

    pub fn l2(&self) -> f64 {
        2.0 * self.l3 / 3.0
    }

    /// The three curve segments: parameter interval and color endpoints.
    fn segments(&self) -> [([f64; 2], [f64; 3], [f64; 3]); 3] {
        [
            ([0.0, self.l1()], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]),
            ([self.l1(), self.l2()], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]),
            ([self.l2(), self.l3], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
        ]
    }
}

/// `[0, 1] → [-1, 1]`.
pub fn to_signed(x: f64) -> f64 {
    (x - 0.5) / 0.5
}

/// `[-1, 1] → [0, 1]`.
pub fn from_signed(y: f64) -> f64 {
    0.5 * y + 0.5
}

/// Curve color of a non-negative reading, on the `[0, 1]` scale.
pub fn power_to_rgb(p: f64, levels: &EncodingLevels) -> [f64; 3] {
    let (l1, l2, l3) = (levels.l1(), levels.l2(), levels.l3);
    if p < l1 {
        [0.0, 1.0 - p / l1, p / l1]
    } else if p < l2 {
        let s = (p - l1) / (l2 - l1);
        [s, 0.0, 1.0 - s]
    } else if p < l3 {
        [1.0 - (p - l2) / (l3 - l2), 0.0, 0.0]
    } else {
        [0.0, 0.0, 0.0]
    }
}

/// Nearest curve parameter to a `[0, 1]`-scale color and its distance.
/// Ties go to the smaller parameter.
pub fn rgb_to_power(rgb: [f64; 3], levels: &EncodingLevels) -> (f64, f64) {
    let x = rgb.map(|v| v.clamp(0.0, 1.0));
    let mut best = (0.0, f64::INFINITY);
    for ([p0, p1], a, b) in levels.segments() {
        let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let rel = [x[0] - a[0], x[1] - a[1], x[2] - a[2]];
        let dd = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        let s = ((rel[0] * d[0] + rel[1] * d[1] + rel[2] * d[2]) / dd).clamp(0.0, 1.0);
        let dist = (0..3).map(|k| (rel[k] - s * d[k]).powi(2)).sum::<f64>().sqrt();
        let p = if s >= 1.0 { p1 } else { p0 + s * (p1 - p0) };
        if dist < best.1 {
            best = (p, dist);
        }
    }
    best
}

/// A 4-channel image laid out `[channel][m][n]`, values in `[-1, 1]`.
/// Channel order is r, g, b, t.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedImage {
    pub m: usize,
    pub n: usize,
    /// Saturation level the image was encoded with.
    pub l3: f64,
    pub data: Vec<f64>,
}

impl EncodedImage {
    pub fn new(m: usize, n: usize, l3: f64, data: Vec<f64>) -> Result<Self, CodecError> {
        if data.len() != CHANNELS * m * n {
            return Err(CodecError::Shape(format!("{} values for a {m}x{n}x4 image", data.len())));
        }
        Ok(Self { m, n, l3, data })
    }

    pub fn at(&self, c: usize, m: usize, n: usize) -> f64 {
        self.data[(c * self.m + m) * self.n + n]
    }
}

/// Counters collected while encoding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EncodeReport {
    pub clamped_temperatures: usize,
}

/// Encodes an `M × N` row-major kW matrix and its `M` temperatures.
pub fn encode(
    kw: &[f64],
    temperature: &[f64],
    m: usize,
    n: usize,
    levels: &EncodingLevels,
) -> Result<(EncodedImage, EncodeReport), CodecError> {
    levels.validate()?;
    if kw.len() != m * n || temperature.len() != m {
        return Err(CodecError::Shape(format!(
            "{} readings and {} temperatures for M={m}, N={n}",
            kw.len(),
            temperature.len()
        )));
    }
    let mut data = vec![0.0; CHANNELS * m * n];
    let mut report = EncodeReport::default();
    let plane = m * n;
    for i in 0..m {
        let t = temperature[i];
        let tc = t.clamp(0.0, levels.t_max);
        if tc != t {
            report.clamped_temperatures += 1;
        }
        let t_enc = to_signed(tc / levels.t_max);
        for j in 0..n {
            let p = kw[i * n + j];
            if !(p >= 0.0 && p.is_finite()) {
                return Err(CodecError::BadPower { m: i, n: j, value: p });
            }
            let rgb = power_to_rgb(p, levels);
            let at = i * n + j;
            for c in 0..3 {
                data[c * plane + at] = to_signed(rgb[c]);
            }
            data[3 * plane + at] = t_enc;
        }
    }
    if report.clamped_temperatures > 0 {
        log::warn!("clamped {} temperatures into [0, {}]", report.clamped_temperatures, levels.t_max);
    }
    Ok((EncodedImage { m, n, l3: levels.l3, data }, report))
}

/// Result of decoding one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub kw: Vec<f64>,
    /// Mean of the temperature channel across columns, per row.
    pub temperature: Vec<f64>,
    /// Entries farther than [`OFF_CURVE_FLAG`] from the curve.
    pub off_curve: usize,
    pub max_distance: f64,
}

pub fn decode(image: &EncodedImage, levels: &EncodingLevels) -> Decoded {
    let (m, n) = (image.m, image.n);
    let mut kw = vec![0.0; m * n];
    let mut temperature = vec![0.0; m];
    let (mut off_curve, mut max_distance) = (0, 0.0f64);
    for i in 0..m {
        let mut t_acc = 0.0;
        for j in 0..n {
            let rgb = [0, 1, 2].map(|c| from_signed(image.at(c, i, j).clamp(-1.0, 1.0)));
            let (p, dist) = rgb_to_power(rgb, levels);
            kw[i * n + j] = p;
            if dist > OFF_CURVE_FLAG {
                off_curve += 1;
            }
            max_distance = max_distance.max(dist);
            t_acc += image.at(3, i, j).clamp(-1.0, 1.0);
        }
        temperature[i] = levels.t_max * from_signed(t_acc / n.max(1) as f64);
    }
    Decoded {
        kw,
        temperature,
        off_curve,
        max_distance,
    }
}

/// Writes the color channels as an RGB PNG (time down, one 4-pixel-wide
/// stripe per profile) with the temperature channel as a grayscale strip on
/// the right, separated by a white column.
pub fn write_png(image: &EncodedImage, path: &Path) -> Result<(), CodecError> {
    const STRIPE: usize = 4;
    let width = image.n * STRIPE + 1 + STRIPE;
    let to_u8 = |v: f64| (from_signed(v.clamp(-1.0, 1.0)) * 255.0).round() as u8;
    let mut pixels = Vec::with_capacity(width * image.m * 3);
    for i in 0..image.m {
        for j in 0..image.n {
            let px = [0, 1, 2].map(|c| to_u8(image.at(c, i, j)));
            for _ in 0..STRIPE {
                pixels.extend_from_slice(&px);
            }
        }
        pixels.extend_from_slice(&[255, 255, 255]);
        let g = to_u8(image.at(3, i, 0));
        for _ in 0..STRIPE {
            pixels.extend_from_slice(&[g, g, g]);
        }
    }
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, image.m as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| CodecError::Png(e.to_string()))?;
    writer.write_image_data(&pixels).map_err(|e| CodecError::Png(e.to_string()))?;
    Ok(())
}
