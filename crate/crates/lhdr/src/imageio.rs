//! Core image types plus bit-exact PFM and binary PPM codecs.
//!
//! PFM is the HDR container (plain float32 samples, no shared-exponent
//! quantization); the writer always emits the canonical little-endian form
//! `PF\n{w} {h}\n-1.0\n` followed by bottom-to-top rows, while the reader
//! accepts both endiannesses via the sign of the scale line. PPM is binary
//! P6 with maxval 255 only.

use crate::{Error, Result};

/// Linear, non-negative HDR radiance, RGB row-major top-to-bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RadianceMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("radiance map dimensions must be nonzero"));
        }
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "radiance data length {} != {}x{}x3",
                data.len(),
                width,
                height
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!("radiance sample {v} is not finite and >= 0")));
        }
        Ok(Self { width, height, data })
    }

    /// Fills a map from a per-pixel RGB closure.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Multiplies every sample by `factor`. Exact for powers of two.
    pub fn scaled(&self, factor: f32) -> RadianceMap {
        RadianceMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

/// 8-bit gamma-encoded display image, RGB row-major top-to-bottom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LdrImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LdrImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be nonzero"));
        }
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "pixel data length {} != {}x{}x3",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Pulls the next whitespace-delimited token, skipping `#` comments.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize, format: &'static str) -> Result<&'a [u8]> {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b' ' | b'\t' | b'\r' | b'\n' => *pos += 1,
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format(format, "unexpected end of header"));
    }
    Ok(&bytes[start..*pos])
}

fn parse_dim(token: &[u8], format: &'static str) -> Result<usize> {
    let s = std::str::from_utf8(token).map_err(|_| Error::format(format, "non-ASCII header token"))?;
    let v: usize = s.parse().map_err(|_| Error::format(format, format!("bad dimension {s:?}")))?;
    if v == 0 {
        return Err(Error::format(format, "zero dimension"));
    }
    Ok(v)
}

/// Decodes a PFM byte stream into a radiance map.
///
/// The scale line's sign selects endianness (negative = little). PFM stores
/// rows bottom-to-top; they are flipped to top-to-bottom here and flipped
/// back on write, so samples survive a round trip bit-for-bit.
pub fn read_pfm(bytes: &[u8]) -> Result<RadianceMap> {
    const F: &str = "PFM";
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos, F)?;
    if magic != b"PF" {
        return Err(Error::format(F, "missing PF magic (only 3-channel maps supported)"));
    }
    let width = parse_dim(next_token(bytes, &mut pos, F)?, F)?;
    let height = parse_dim(next_token(bytes, &mut pos, F)?, F)?;
    let scale_tok = next_token(bytes, &mut pos, F)?;
    let scale: f64 = std::str::from_utf8(scale_tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(F, "bad scale line"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(F, "scale must be finite and nonzero"));
    }
    let little_endian = scale < 0.0;
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(F, "missing header terminator"));
    }
    pos += 1;

    let n = width * height * 3;
    let payload = &bytes[pos..];
    if payload.len() < n * 4 {
        return Err(Error::format(F, format!("truncated payload: {} < {} bytes", payload.len(), n * 4)));
    }
    let mut data = vec![0.0f32; n];
    for y in 0..height {
        // PFM row 0 is the bottom image row.
        let src_row = height - 1 - y;
        for i in 0..width * 3 {
            let off = (src_row * width * 3 + i) * 4;
            let raw: [u8; 4] = payload[off..off + 4].try_into().unwrap();
            let v = if little_endian { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
            if !v.is_finite() || v < 0.0 {
                return Err(Error::format(F, format!("sample {v} is not finite and >= 0")));
            }
            data[y * width * 3 + i] = v;
        }
    }
    RadianceMap::new(width, height, data)
}

/// Encodes a radiance map as canonical little-endian PFM.
pub fn write_pfm(img: &RadianceMap) -> Result<Vec<u8>> {
    if img.width == 0 || img.height == 0 {
        return Err(Error::invalid("cannot write zero-sized PFM"));
    }
    let header = format!("PF\n{} {}\n-1.0\n", img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + img.data.len() * 4);
    out.extend_from_slice(header.as_bytes());
    for y in (0..img.height).rev() {
        let row = &img.data[y * img.width * 3..(y + 1) * img.width * 3];
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes a binary P6 PPM with maxval 255.
pub fn read_ppm(bytes: &[u8]) -> Result<LdrImage> {
    const F: &str = "PPM";
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos, F)?;
    if magic != b"P6" {
        return Err(Error::format(F, "missing P6 magic"));
    }
    let width = parse_dim(next_token(bytes, &mut pos, F)?, F)?;
    let height = parse_dim(next_token(bytes, &mut pos, F)?, F)?;
    let maxval = parse_dim(next_token(bytes, &mut pos, F)?, F)?;
    if maxval != 255 {
        return Err(Error::format(F, format!("unsupported maxval {maxval} (only 255)")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(F, "missing header terminator"));
    }
    pos += 1;
    let n = width * height * 3;
    let payload = &bytes[pos..];
    if payload.len() < n {
        return Err(Error::format(F, format!("truncated payload: {} < {n} bytes", payload.len())));
    }
    LdrImage::new(width, height, payload[..n].to_vec())
}

/// Encodes an image as binary P6 PPM, maxval 255, no comments.
pub fn write_ppm(img: &LdrImage) -> Result<Vec<u8>> {
    if img.width == 0 || img.height == 0 {
        return Err(Error::invalid("cannot write zero-sized PPM"));
    }
    let header = format!("P6\n{} {}\n255\n", img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + img.data.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&img.data);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn pfm_single_pixel_decode() {
        let mut bytes = b"PF\n1 1\n-1.0\n".to_vec();
        for _ in 0..3 {
            bytes.extend_from_slice(&0.5f32.to_le_bytes());
        }
        let img = read_pfm(&bytes).unwrap();
        assert_eq!((img.width, img.height), (1, 1));
        assert_eq!(img.data, vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn pfm_canonical_bytes_round_trip() {
        let img = RadianceMap::new(1, 1, vec![1.0, 1.0, 1.0]).unwrap();
        let bytes = write_pfm(&img).unwrap();
        assert_eq!(&bytes[..12], b"PF\n1 1\n-1.0\n");
        assert_eq!(bytes.len(), 12 + 12);
        // Canonical files reproduce themselves byte for byte.
        assert_eq!(write_pfm(&read_pfm(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn pfm_big_endian_read() {
        let mut bytes = b"PF\n2 1\n1.0\n".to_vec();
        for v in [0.25f32, 0.5, 1.0, 2.0, 4.0, 8.0] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        let img = read_pfm(&bytes).unwrap();
        assert_eq!(img.data, vec![0.25, 0.5, 1.0, 2.0, 4.0, 8.0]);
    }

    #[test]
    fn pfm_row_order_flips() {
        // 1x2 image: PFM stores the bottom row first.
        let img = RadianceMap::new(1, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = write_pfm(&img).unwrap();
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(first, 4.0); // bottom row (y=1) written first
        assert_eq!(read_pfm(&bytes).unwrap(), img);
    }

    #[test]
    fn pfm_degenerate_dims_rejected() {
        assert!(read_pfm(b"PF\n0 0\n").is_err());
        assert!(read_pfm(b"PF\n4 0\n-1.0\n").is_err());
    }

    #[test]
    fn pfm_truncated_and_invalid_samples_rejected() {
        let mut bytes = b"PF\n1 1\n-1.0\n".to_vec();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        assert!(read_pfm(&bytes).is_err()); // 4 of 12 payload bytes

        let mut neg = b"PF\n1 1\n-1.0\n".to_vec();
        for v in [-1.0f32, 0.0, 0.0] {
            neg.extend_from_slice(&v.to_le_bytes());
        }
        assert!(read_pfm(&neg).is_err());

        let mut nan = b"PF\n1 1\n-1.0\n".to_vec();
        for v in [f32::NAN, 0.0, 0.0] {
            nan.extend_from_slice(&v.to_le_bytes());
        }
        assert!(read_pfm(&nan).is_err());
    }

    #[test]
    fn ppm_single_pixel() {
        let bytes = b"P6\n1 1\n255\n\x00\x80\xff";
        let img = read_ppm(bytes).unwrap();
        assert_eq!(img.data, vec![0, 128, 255]);
    }

    #[test]
    fn ppm_comments_tolerated() {
        let bytes = b"P6 # a comment\n2 # widths\n1\n255\n\x01\x02\x03\x04\x05\x06";
        let img = read_ppm(bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.data, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn ppm_maxval_must_be_255() {
        assert!(read_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
    }

    #[test]
    fn ppm_truncated_rejected() {
        assert!(read_ppm(b"P6\n2 2\n255\n\x00\x00\x00").is_err());
    }

    fn random_radiance(rng: &mut SplitMix64, w: usize, h: usize) -> RadianceMap {
        let data = (0..w * h * 3).map(|_| (rng.next_f64() * 100.0) as f32).collect();
        RadianceMap::new(w, h, data).unwrap()
    }

    #[test]
    fn pfm_round_trip_random_64x64() {
        let mut rng = SplitMix64::new(11);
        let img = random_radiance(&mut rng, 64, 64);
        let bytes = write_pfm(&img).unwrap();
        let back = read_pfm(&bytes).unwrap();
        assert_eq!(back.data, img.data);
        assert_eq!(write_pfm(&back).unwrap(), bytes);
    }

    #[test]
    fn ppm_round_trip_random_32x32() {
        let mut rng = SplitMix64::new(13);
        let data: Vec<u8> = (0..32 * 32 * 3).map(|_| (rng.next_u64() & 0xff) as u8).collect();
        let img = LdrImage::new(32, 32, data).unwrap();
        let bytes = write_ppm(&img).unwrap();
        assert_eq!(read_ppm(&bytes).unwrap(), img);
    }

    proptest::proptest! {
        #[test]
        fn prop_ppm_round_trip(w in 1usize..12, h in 1usize..12, seed in 0u64..1000) {
            let mut rng = SplitMix64::new(seed);
            let data: Vec<u8> = (0..w * h * 3).map(|_| (rng.next_u64() & 0xff) as u8).collect();
            let img = LdrImage::new(w, h, data).unwrap();
            proptest::prop_assert_eq!(read_ppm(&write_ppm(&img).unwrap()).unwrap(), img);
        }

        #[test]
        fn prop_pfm_round_trip(w in 1usize..10, h in 1usize..10, seed in 0u64..1000) {
            let mut rng = SplitMix64::new(seed);
            let img = random_radiance(&mut rng, w, h);
            let back = read_pfm(&write_pfm(&img).unwrap()).unwrap();
            proptest::prop_assert_eq!(back, img);
        }
    }
}
