//! Binary portable graymap (P5) and pixmap (P6) files, 8-bit only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit raster with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(malformed(pos, "truncated header"));
            }
            fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
        }
        let channels = match fields[0].1.as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(malformed(0, format!("unsupported magic '{other}'"))),
        };
        let number = |i: usize| -> Result<usize> {
            fields[i]
                .1
                .parse()
                .map_err(|_| malformed(fields[i].0, format!("bad header field '{}'", fields[i].1)))
        };
        let (width, height, maxval) = (number(1)?, number(2)?, number(3)?);
        if maxval != 255 {
            return Err(malformed(fields[3].0, format!("maxval {maxval}, only 255 is supported")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let need = width * height * channels;
        let pixels = bytes.get(pos..).unwrap_or(&[]);
        if pixels.len() != need {
            return Err(malformed(
                pos + pixels.len().min(need),
                format!("raster has {} bytes, expected {need}", pixels.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels: pixels.to_vec(),
        })
    }

    /// Channel-first tensor in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.width * self.height;
        let mut data = vec![0.0f32; self.channels * hw];
        for (i, &p) in self.pixels.iter().enumerate() {
            data[(i % self.channels) * hw + i / self.channels] = f32::from(p) / 255.0;
        }
        Tensor::new(vec![self.channels, self.height, self.width], data).expect("raster shape")
    }

    /// Quantizes a `C×H×W` tensor in `[0, 1]` (C = 1 or 3).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = match *t.shape() {
            [c @ (1 | 3), h, w] => (c, h, w),
            ref s => return Err(Error::dim("pnm", format!("expected 1×H×W or 3×H×W, got {s:?}"))),
        };
        let hw = h * w;
        let mut pixels = vec![0u8; c * hw];
        for (i, p) in pixels.iter_mut().enumerate() {
            *p = quantize(t.data()[(i % c) * hw + i / c]);
        }
        Ok(Self {
            width: w,
            height: h,
            channels: c,
            pixels,
        })
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn malformed(offset: usize, detail: impl Into<String>) -> Error {
    Error::Malformed {
        format: "pnm",
        offset: offset as u64,
        detail: detail.into(),
    }
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Raster::decode(&bytes)?.to_tensor())
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let raster = Raster::from_tensor(image)?;
    fs::write(path, raster.encode()).map_err(|e| Error::io(path, e))
}
