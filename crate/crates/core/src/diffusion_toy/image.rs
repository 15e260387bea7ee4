use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SIDE: usize = 32;
pub const PIXELS: usize = SIDE * SIDE;

/// Single-channel 32×32 image with values in [−1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage {
    data: Vec<f64>,
}

impl ToyImage {
    /// Values outside [−1, 1] are clamped; non-finite values are rejected.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.len() != PIXELS {
            return Err(Error::dim("toy image", &[data.len()], &[PIXELS]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("image contains non-finite values"));
        }
        Ok(Self {
            data: data.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        })
    }

    pub fn filled(v: f64) -> Self {
        Self {
            data: vec![v.clamp(-1.0, 1.0); PIXELS],
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, SIDE, SIDE], self.data.clone()).expect("fixed size")
    }

    /// Stacks images into [B × 1 × 32 × 32].
    pub fn batch(images: &[ToyImage]) -> Tensor {
        let data = images.iter().flat_map(|i| i.data.iter().copied()).collect();
        Tensor::new(vec![images.len(), 1, SIDE, SIDE], data).expect("fixed size")
    }

    /// Splits [B × 1 × 32 × 32] back into clamped images.
    pub fn unbatch(t: &Tensor) -> Result<Vec<ToyImage>> {
        if !t.len().is_multiple_of(PIXELS) || t.is_empty() {
            return Err(Error::dim("unbatch images", t.shape(), &[0, 1, SIDE, SIDE]));
        }
        t.data().chunks(PIXELS).map(|c| ToyImage::new(c.to_vec())).collect()
    }

    fn to_byte(v: f64) -> u8 {
        ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
    }

    fn from_byte(b: u8, maxval: u32) -> f64 {
        b as f64 / maxval as f64 * 2.0 - 1.0
    }

    /// Binary (P5) encoding, linear map [−1, 1] → [0, 255].
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{SIDE} {SIDE}\n255\n").into_bytes();
        out.extend(self.data.iter().map(|&v| Self::to_byte(v)));
        out
    }

    /// ASCII (P2) encoding.
    pub fn to_pgm_ascii(&self) -> String {
        let mut out = format!("P2\n{SIDE} {SIDE}\n255\n");
        for row in self.data.chunks(SIDE) {
            let line: Vec<String> = row.iter().map(|&v| Self::to_byte(v).to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    /// Parses P2 or P5 data of size 32×32.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut r = BufReader::new(bytes);
        let mut header = Vec::new();
        // magic, width, height, maxval, skipping comments
        while header.len() < 4 {
            let mut tok = Vec::new();
            loop {
                let mut b = [0u8];
                if r.read(&mut b).map_err(|e| Error::Parse(e.to_string()))? == 0 {
                    break;
                }
                match b[0] {
                    b'#' if tok.is_empty() => {
                        let mut skip = String::new();
                        r.read_line(&mut skip).map_err(|e| Error::Parse(e.to_string()))?;
                    }
                    c if c.is_ascii_whitespace() => {
                        if !tok.is_empty() {
                            break;
                        }
                    }
                    c => tok.push(c),
                }
            }
            if tok.is_empty() {
                return Err(Error::Parse("truncated PGM header".into()));
            }
            header.push(String::from_utf8_lossy(&tok).into_owned());
        }
        let num = |s: &str| -> Result<u32> { s.parse().map_err(|_| Error::Parse(format!("bad PGM header field {s:?}"))) };
        let (w, h, maxval) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
        if w as usize != SIDE || h as usize != SIDE {
            return Err(Error::Parse(format!("expected a {SIDE}x{SIDE} image, got {w}x{h}")));
        }
        if maxval == 0 || maxval > 255 {
            return Err(Error::Parse(format!("unsupported PGM maxval {maxval}")));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::Parse(e.to_string()))?;
        let raw: Vec<u8> = match header[0].as_str() {
            "P5" => rest,
            "P2" => String::from_utf8_lossy(&rest)
                .split_ascii_whitespace()
                .map(|t| t.parse::<u8>().map_err(|_| Error::Parse(format!("bad PGM sample {t:?}"))))
                .collect::<Result<_>>()?,
            m => return Err(Error::Parse(format!("unsupported PGM magic {m:?}"))),
        };
        if raw.len() < PIXELS {
            return Err(Error::Parse(format!("PGM has {} samples, expected {PIXELS}", raw.len())));
        }
        Self::new(raw[..PIXELS].iter().map(|&b| Self::from_byte(b.min(maxval as u8), maxval)).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm(&bytes).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}
