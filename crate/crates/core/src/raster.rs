//! Plain raster containers and PGM / PNG file I/O.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel real-valued raster, row-major, row 0 at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                values.push(f(c, r));
            }
        }
        Self {
            width,
            height,
            values,
        }
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

pub fn write_pgm8(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    debug_assert_eq!(bytes.len(), width * height);
    ensure_parent(path)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{width} {height}\n255\n").map_err(|e| Error::io(path, e))?;
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// 16-bit PGM, samples big-endian as the format requires.
pub fn write_pgm16(path: &Path, width: usize, height: usize, samples: &[u16]) -> Result<()> {
    debug_assert_eq!(samples.len(), width * height);
    ensure_parent(path)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{width} {height}\n65535\n").map_err(|e| Error::io(path, e))?;
    for s in samples {
        w.write_all(&s.to_be_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Raw PGM contents: dimensions, maxval and samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl Pgm {
    /// Samples scaled to [0, 1].
    pub fn to_gray(&self) -> GrayImage {
        let m = f64::from(self.maxval);
        GrayImage {
            width: self.width,
            height: self.height,
            values: self.samples.iter().map(|&s| f64::from(s) / m).collect(),
        }
    }
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: message.to_string(),
    };
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PGM header number"));
    let (width, height, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(bad("PGM maxval out of range"));
    }
    pos += 1;
    let wide = maxval > 255;
    let need = width * height * if wide { 2 } else { 1 };
    let data = bytes
        .get(pos..pos + need)
        .ok_or_else(|| bad("truncated PGM data"))?;
    let samples = if wide {
        data.chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect()
    } else {
        data.iter().map(|&b| u16::from(b)).collect()
    };
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

pub fn write_png_gray(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    write_png(path, width, height, png::ColorType::Grayscale, bytes)
}

pub fn write_png_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    write_png(path, width, height, png::ColorType::Rgb, rgb)
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    data: &[u8],
) -> Result<()> {
    ensure_parent(path)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(data).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trips_8_and_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let p8 = dir.path().join("a.pgm");
        write_pgm8(&p8, 3, 2, &[0, 1, 2, 253, 254, 255]).unwrap();
        let back = read_pgm(&p8).unwrap();
        assert_eq!((back.width, back.height, back.maxval), (3, 2, 255));
        assert_eq!(back.samples, vec![0, 1, 2, 253, 254, 255]);

        let p16 = dir.path().join("b.pgm");
        write_pgm16(&p16, 2, 1, &[0, 65535]).unwrap();
        let back = read_pgm(&p16).unwrap();
        assert_eq!(back.samples, vec![0, 65535]);
        assert_eq!(back.to_gray().values, vec![0.0, 1.0]);
    }

    #[test]
    fn png_writer_produces_signature() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        write_png_rgb(&p, 2, 1, &[255, 0, 0, 0, 255, 0]).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }
}
