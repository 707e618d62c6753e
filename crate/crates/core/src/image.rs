//! 8-bit grayscale rasters: binary PGM (P5) and PNG.

use std::io::{self, BufRead, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("malformed PGM: {0}")]
    Pgm(String),
    #[error("png: {0}")]
    Png(String),
    #[error("unsupported image format for {0}")]
    Format(String),
    #[error("image is empty")]
    Empty,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Row-major 8-bit grayscale image; row 0 is the top (y = 0).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Empty);
        }
        if pixels.len() != width * height {
            return Err(ImageError::Pgm(format!("{} pixels for {width}x{height}", pixels.len())));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self { width, height, pixels: vec![value; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn write_pgm(&self, mut w: impl Write) -> io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.pixels)
    }

    pub fn read_pgm(r: impl Read) -> Result<Self, ImageError> {
        let mut r = io::BufReader::new(r);
        let mut tokens = Vec::new();
        while tokens.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(ImageError::Pgm("truncated header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            tokens.extend(content.split_whitespace().map(str::to_owned));
        }
        if tokens[0] != "P5" {
            return Err(ImageError::Pgm(format!("magic {:?}, expected P5", tokens[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| ImageError::Pgm(format!("bad header field {s:?}")));
        let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
        if maxval == 0 || maxval > 65535 {
            return Err(ImageError::Pgm(format!("maxval {maxval}")));
        }
        let bpp = if maxval > 255 { 2 } else { 1 };
        let mut raw = vec![0u8; width * height * bpp];
        r.read_exact(&mut raw).map_err(|_| ImageError::Pgm("truncated pixel data".into()))?;
        let pixels = if bpp == 1 {
            raw.iter().map(|&v| ((v as usize * 255 + maxval / 2) / maxval) as u8).collect()
        } else {
            raw.chunks(2)
                .map(|c| (((u16::from_be_bytes([c[0], c[1]]) as usize) * 255 + maxval / 2) / maxval) as u8)
                .collect()
        };
        Self::new(width, height, pixels)
    }

    pub fn read_png(mut r: impl Read) -> Result<Self, ImageError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut decoder = png::Decoder::new(io::Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| ImageError::Png(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| ImageError::Png("image too large".into()))?];
        let info = reader.next_frame(&mut buf).map_err(|e| ImageError::Png(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let data = &buf[..info.buffer_size()];
        let channels = info.color_type.samples();
        let luma = |px: &[u8]| -> u8 {
            match px.len() {
                1 | 2 => px[0],
                _ => ((299 * px[0] as u32 + 587 * px[1] as u32 + 114 * px[2] as u32 + 500) / 1000) as u8,
            }
        };
        let pixels = data.chunks(channels).map(luma).collect();
        Self::new(w, h, pixels)
    }

    pub fn write_png(&self, w: impl Write) -> Result<(), ImageError> {
        let mut enc = png::Encoder::new(w, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| ImageError::Png(e.to_string()))?;
        writer.write_image_data(&self.pixels).map_err(|e| ImageError::Png(e.to_string()))?;
        writer.finish().map_err(|e| ImageError::Png(e.to_string()))
    }

    /// Loads a PGM or PNG file chosen by extension.
    pub fn load(path: &Path) -> Result<Self, ImageError> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        let file = std::fs::File::open(path)?;
        match ext.as_str() {
            "pgm" => Self::read_pgm(file),
            "png" => Self::read_png(file),
            _ => Err(ImageError::Format(path.display().to_string())),
        }
    }
}
