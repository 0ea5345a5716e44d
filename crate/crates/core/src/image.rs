//! Linear float images plus PPM (8-bit) and PFM (32-bit float) codecs.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major, channel-interleaved image of linear `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let mut data = Vec::with_capacity(width * height * value.len());
        for _ in 0..width * height {
            data.extend_from_slice(value);
        }
        Image {
            width,
            height,
            channels: value.len(),
            data,
        }
    }

    pub fn from_rgb(width: usize, height: usize, pixels: &[[f64; 3]]) -> Self {
        assert_eq!(pixels.len(), width * height);
        Image {
            width,
            height,
            channels: 3,
            data: pixels.iter().flatten().copied().collect(),
        }
    }

    pub fn from_gray(width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height);
        Image {
            width,
            height,
            channels: 1,
            data: values,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn rgb(&self, index: usize) -> [f64; 3] {
        let i = index * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height || self.channels != other.channels
        {
            return Err(Error::SizeMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    /// Clamps to `[0, 1]` and quantizes to 8 bits.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.data.len().max(1) as f64
    }
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn header_usize(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = next_token(bytes, pos).ok_or_else(|| Error::parse(what, "truncated header"))?;
    tok.parse()
        .map_err(|_| Error::parse(what, format!("bad header field {tok:?}")))
}

/// Decodes binary PPM (`P6`) or PGM (`P5`) with maxval 255. Values map to `v / 255`.
pub fn decode_ppm(bytes: &[u8], what: &str) -> Result<Image> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos).ok_or_else(|| Error::parse(what, "empty file"))?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(Error::parse(what, format!("unsupported magic {other:?}"))),
    };
    let width = header_usize(bytes, &mut pos, what)?;
    let height = header_usize(bytes, &mut pos, what)?;
    let maxval = header_usize(bytes, &mut pos, what)?;
    if maxval != 255 {
        return Err(Error::parse(what, format!("only 8-bit maxval supported, got {maxval}")));
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    let n = width * height * channels;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::parse(what, "truncated raster"))?;
    Ok(Image {
        width,
        height,
        channels,
        data: raster.iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => panic!("PPM export needs 1 or 3 channels, got {c}"),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_u8());
    out
}

/// Decodes a PFM (`PF` colour / `Pf` grey). Rows are stored bottom-to-top.
pub fn decode_pfm(bytes: &[u8], what: &str) -> Result<Image> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos).ok_or_else(|| Error::parse(what, "empty file"))?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::parse(what, format!("unsupported magic {other:?}"))),
    };
    let width = header_usize(bytes, &mut pos, what)?;
    let height = header_usize(bytes, &mut pos, what)?;
    let scale_tok =
        next_token(bytes, &mut pos).ok_or_else(|| Error::parse(what, "missing scale"))?;
    let scale: f32 = scale_tok
        .parse()
        .map_err(|_| Error::parse(what, format!("bad scale {scale_tok:?}")))?;
    let little = scale < 0.0;
    pos += 1;
    let n = width * height * channels;
    let raster = bytes
        .get(pos..pos + 4 * n)
        .ok_or_else(|| Error::parse(what, "truncated raster"))?;
    let mut data = vec![0.0; n];
    let row = width * channels;
    for (i, c) in raster.chunks_exact(4).enumerate() {
        let b: [u8; 4] = c.try_into().unwrap();
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (file_row, col) = (i / row, i % row);
        data[(height - 1 - file_row) * row + col] = v as f64;
    }
    Ok(Image {
        width,
        height,
        channels,
        data,
    })
}

pub fn encode_pfm(img: &Image) -> Vec<u8> {
    let magic = match img.channels {
        1 => "Pf",
        3 => "PF",
        c => panic!("PFM export needs 1 or 3 channels, got {c}"),
    };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    let row = img.width * img.channels;
    for y in (0..img.height).rev() {
        for v in &img.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

fn is_pfm(path: &Path) -> bool {
    path.extension()
        .map(|e| e.eq_ignore_ascii_case("pfm"))
        .unwrap_or(false)
}

/// Reads a `.pfm` or PPM/PGM file, chosen by extension.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let what = path.display().to_string();
    if is_pfm(path) {
        decode_pfm(&bytes, &what)
    } else {
        decode_ppm(&bytes, &what)
    }
}

/// Writes `.pfm` as float, anything else as 8-bit PPM/PGM.
pub fn write_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = if is_pfm(path) {
        encode_pfm(img)
    } else {
        encode_ppm(img)
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ppm_header_with_comment() {
        let bytes = b"P6\n# made by hand\n2 1\n255\n\x00\x80\xff\x01\x02\x03";
        let img = decode_ppm(bytes, "mem").unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 1, 3));
        assert_eq!(img.data[2], 1.0);
        assert_eq!(img.data[1], 128.0 / 255.0);
    }

    #[test]
    fn pfm_stores_rows_bottom_up() {
        let img = Image::from_gray(1, 2, vec![1.0, 2.0]);
        let bytes = encode_pfm(&img);
        let tail = &bytes[bytes.len() - 8..];
        assert_eq!(f32::from_le_bytes(tail[..4].try_into().unwrap()), 2.0);
        assert_eq!(decode_pfm(&bytes, "mem").unwrap(), img);
    }

    #[test]
    fn rejects_16_bit_ppm() {
        let err = decode_ppm(b"P6 1 1 65535\n\0\0\0\0\0\0", "mem").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    proptest! {
        #[test]
        fn ppm_round_trip_is_bit_exact(w in 1usize..8, h in 1usize..8, seed in any::<u64>()) {
            let raw: Vec<u8> = (0..w * h * 3).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8).collect();
            let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
            bytes.extend(&raw);
            let img = decode_ppm(&bytes, "mem").unwrap();
            prop_assert_eq!(encode_ppm(&img), bytes);
        }

        #[test]
        fn pfm_round_trip_is_exact_for_f32(vals in prop::collection::vec(-1e3f32..1e3, 12)) {
            let img = Image { width: 2, height: 2, channels: 3, data: vals.iter().map(|&v| v as f64).collect() };
            prop_assert_eq!(decode_pfm(&encode_pfm(&img), "mem").unwrap(), img);
        }
    }
}
