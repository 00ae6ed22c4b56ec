//! Binary PGM (`P5`) and PPM (`P6`) with 8-bit samples.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit raster, one or three channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid("Raster", format!("{} channels, expected 1 or 3", channels)));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::shape(
                "Raster",
                format!("{} bytes for {}x{}x{}", pixels.len(), width, height, channels),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// `[C, H, W]` with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (c, h, w) = (self.channels, self.height, self.width);
        Tensor::from_fn([c, h, w], |i| {
            let (ch, p) = (i / (h * w), i % (h * w));
            self.pixels[p * c + ch] as f64 / 255.0
        })
    }

    /// Inverse of [`to_tensor`](Self::to_tensor); values are clamped to `[0, 1]` and rounded.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [c, h, w] = *t.shape() else {
            return Err(Error::shape("Raster::from_tensor", format!("expected [C,H,W], got {:?}", t.shape())));
        };
        let mut pixels = vec![0u8; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                let v = t.data()[ch * h * w + p].clamp(0.0, 1.0);
                pixels[p * c + ch] = (v * 255.0).round() as u8;
            }
        }
        Raster::new(w, h, c, pixels)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        write!(w, "{magic}\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.pixels)?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let bad = |d: &str| Error::format("PNM", d.to_string());
        let mut tokens = Vec::new();
        while tokens.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(bad("truncated header"));
            }
            let content = line.split('#').next().unwrap_or("");
            tokens.extend(content.split_whitespace().map(str::to_string));
        }
        if tokens.len() > 4 {
            return Err(bad("unexpected data after maxval"));
        }
        let channels = match tokens[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            m => return Err(bad(&format!("unsupported magic {m:?}"))),
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad number {s:?}")));
        let (width, height, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
        if maxval != 255 {
            return Err(bad(&format!("maxval {maxval} unsupported, expected 255")));
        }
        let mut pixels = vec![0u8; width * height * channels];
        r.read_exact(&mut pixels).map_err(|_| bad("truncated pixel data"))?;
        Raster::new(width, height, channels, pixels)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(std::fs::File::open(path)?)
    }
}
