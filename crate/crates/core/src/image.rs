//! RGB images in `[0, 1]`, label maps and a minimal PPM codec.

use std::io::{BufRead, BufReader, Read, Write};

use crate::error::{Error, Result};
use crate::spectral::FeatureMap;

/// Row-major `H × W × 3` image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite pixel value".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn clip(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn to_feature_map(&self) -> Result<FeatureMap> {
        FeatureMap::new(self.height, self.width, 3, self.data.clone())
    }

    /// Binary PPM (P6), 8-bit.
    pub fn write_ppm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        out.write_all(&bytes)?;
        Ok(())
    }

    /// Reads P3 (ASCII) or P6 (binary) PPM.
    pub fn read_ppm<R: Read>(input: R) -> Result<Self> {
        let mut reader = BufReader::new(input);
        let mut header = Vec::new();
        while header.len() < 4 {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                return Err(Error::Format("truncated PPM header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            header.extend(content.split_whitespace().map(str::to_owned));
        }
        let magic = header[0].as_str();
        let parse = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad PPM header field '{s}'")))
        };
        let (width, height, maxval) = (parse(&header[1])?, parse(&header[2])?, parse(&header[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
        }
        let n = width * height * 3;
        let raw: Vec<usize> = match magic {
            "P6" => {
                let mut buf = vec![0u8; n];
                reader
                    .read_exact(&mut buf)
                    .map_err(|_| Error::Format("truncated PPM pixel data".into()))?;
                buf.into_iter().map(usize::from).collect()
            }
            "P3" => {
                let mut rest = String::new();
                reader.read_to_string(&mut rest)?;
                let vals: Vec<usize> = header[4..]
                    .iter()
                    .map(String::as_str)
                    .chain(rest.split_whitespace())
                    .map(parse)
                    .collect::<Result<_>>()?;
                if vals.len() < n {
                    return Err(Error::Format("truncated PPM pixel data".into()));
                }
                vals[..n].to_vec()
            }
            other => return Err(Error::Format(format!("unsupported image magic '{other}'"))),
        };
        let data = raw.into_iter().map(|v| v as f64 / maxval as f64).collect();
        Image::new(height, width, data)
    }
}

/// Per-pixel class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "{height}x{width} label map needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn as_indices(&self) -> Vec<usize> {
        self.data.iter().map(|&v| v as usize).collect()
    }

    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &v in &self.data {
            if (v as usize) < classes {
                h[v as usize] += 1;
            }
        }
        h
    }
}
