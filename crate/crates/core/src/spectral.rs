//! Orthonormal 2D frequency transforms applied per channel.
//!
//! Three backends share one layout convention: the spatial grid is a
//! `(H·W) × c` matrix and the transform acts on the two spatial axes only.
//!
//! * `Dct`: type-II DCT with `α(0) = √(1/N)`, `α(k) = √(2/N)` on both axes,
//!   inverted by the matching type-III transform.
//! * `Fft`: unitary 2D DFT (`1/√(HW)` in each direction).
//! * `Haar`: one level of the orthonormal Haar analysis on each axis, leaving
//!   the LL / LH / HL / HH subbands as quadrants of the grid.
//!
//! Every backend is orthogonal (unitary for FFT), so the adjoint of the
//! forward map is its inverse. The autodiff tape relies on that.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Dct,
    Fft,
    Haar,
}

impl Backend {
    pub const ALL: [Backend; 3] = [Backend::Dct, Backend::Fft, Backend::Haar];

    pub fn name(self) -> &'static str {
        match self {
            Backend::Dct => "dct",
            Backend::Fft => "fft",
            Backend::Haar => "haar",
        }
    }

    /// Number of real rows a spectrum occupies for an `h × w` grid.
    pub fn spectrum_rows(self, h: usize, w: usize) -> usize {
        match self {
            Backend::Fft => 2 * h * w,
            Backend::Dct | Backend::Haar => h * w,
        }
    }

    pub fn check_dims(self, h: usize, w: usize) -> Result<()> {
        if h < 2 || w < 2 {
            return Err(Error::Dimension(format!(
                "spatial grid must be at least 2x2, got {h}x{w}"
            )));
        }
        if self == Backend::Haar && (!h.is_multiple_of(2) || !w.is_multiple_of(2)) {
            return Err(Error::Dimension(format!(
                "haar backend needs even dimensions, got {h}x{w}"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dct" => Ok(Backend::Dct),
            "fft" => Ok(Backend::Fft),
            "haar" | "hwt" => Ok(Backend::Haar),
            other => Err(Error::Config(format!("unknown backend '{other}'"))),
        }
    }
}

/// Spatial feature grid, row-major `H·W·c` with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height < 2 || width < 2 || channels < 1 {
            return Err(Error::Dimension(format!(
                "feature map needs H >= 2, W >= 2, c >= 1, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "feature map {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite feature value at index {pos}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for h in 0..height {
            for w in 0..width {
                for c in 0..channels {
                    data.push(f(h, w, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    /// Wraps a `(H·W) × c` matrix.
    pub fn from_matrix(height: usize, width: usize, m: Matrix) -> Result<Self> {
        if m.rows() != height * width {
            return Err(Error::Dimension(format!(
                "matrix has {} rows, expected {}",
                m.rows(),
                height * width
            )));
        }
        let channels = m.cols();
        Self::new(height, width, channels, m.into_vec())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, h: usize, w: usize, c: usize) -> f64 {
        self.data[(h * self.width + w) * self.channels + c]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::new_unchecked(self.height * self.width, self.channels, self.data.clone())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Frequency-domain coefficients. FFT data is interleaved `(re, im)` per
/// coefficient; DCT and Haar data are real.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    height: usize,
    width: usize,
    channels: usize,
    backend: Backend,
    data: Vec<f64>,
}

impl Spectrum {
    pub fn from_parts(height: usize, width: usize, channels: usize, backend: Backend, data: Vec<f64>) -> Result<Self> {
        let expected = backend.spectrum_rows(height, width) * channels;
        if data.len() != expected {
            return Err(Error::Validation(format!(
                "{backend} spectrum {height}x{width}x{channels} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            backend,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize, backend: Backend) -> Self {
        let n = backend.spectrum_rows(height, width) * channels;
        Self {
            height,
            width,
            channels,
            backend,
            data: vec![0.0; n],
        }
    }

    /// Builds a spectrum from the row representation used by the kernels:
    /// for FFT the real parts occupy rows `0..HW` and the imaginary parts
    /// rows `HW..2HW`.
    pub fn from_rows(height: usize, width: usize, backend: Backend, rows: &Matrix) -> Result<Self> {
        let cells = height * width;
        if rows.rows() != backend.spectrum_rows(height, width) {
            return Err(Error::Dimension(format!(
                "{backend} spectrum rows: expected {}, got {}",
                backend.spectrum_rows(height, width),
                rows.rows()
            )));
        }
        let c = rows.cols();
        let data = match backend {
            Backend::Fft => {
                let mut data = Vec::with_capacity(2 * cells * c);
                for cell in 0..cells {
                    for ch in 0..c {
                        data.push(rows[(cell, ch)]);
                        data.push(rows[(cells + cell, ch)]);
                    }
                }
                data
            }
            Backend::Dct | Backend::Haar => rows.as_slice().to_vec(),
        };
        Self::from_parts(height, width, c, backend, data)
    }

    pub fn to_rows(&self) -> Matrix {
        let cells = self.height * self.width;
        let c = self.channels;
        match self.backend {
            Backend::Fft => {
                let mut m = Matrix::zeros(2 * cells, c);
                for cell in 0..cells {
                    for ch in 0..c {
                        let k = 2 * (cell * c + ch);
                        m[(cell, ch)] = self.data[k];
                        m[(cells + cell, ch)] = self.data[k + 1];
                    }
                }
                m
            }
            Backend::Dct | Backend::Haar => Matrix::new_unchecked(cells, c, self.data.clone()),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Coefficient at `(u, v, c)`; for FFT this is the real part.
    pub fn get(&self, u: usize, v: usize, c: usize) -> f64 {
        let idx = (u * self.width + v) * self.channels + c;
        match self.backend {
            Backend::Fft => self.data[2 * idx],
            _ => self.data[idx],
        }
    }

    pub fn complex(&self, u: usize, v: usize, c: usize) -> Complex64 {
        let idx = (u * self.width + v) * self.channels + c;
        match self.backend {
            Backend::Fft => Complex64::new(self.data[2 * idx], self.data[2 * idx + 1]),
            _ => Complex64::new(self.data[idx], 0.0),
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub(crate) fn with_data(&self, data: Vec<f64>) -> Spectrum {
        debug_assert_eq!(data.len(), self.data.len());
        Spectrum { data, ..self.clone() }
    }
}

/// Forward transform of one feature map.
pub fn transform(f: &FeatureMap, backend: Backend) -> Result<Spectrum> {
    backend.check_dims(f.height, f.width)?;
    if f.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite input to transform".into()));
    }
    let rows = forward_rows(backend, &f.to_matrix(), f.height, f.width);
    Spectrum::from_rows(f.height, f.width, backend, &rows)
}

/// Inverse transform back to the spatial grid. For FFT the real part of the
/// inverse is returned.
pub fn inverse(s: &Spectrum) -> Result<FeatureMap> {
    let expected = s.backend.spectrum_rows(s.height, s.width) * s.channels;
    if s.data.len() != expected {
        return Err(Error::Validation(format!(
            "spectrum data length {} does not match {} layout ({expected})",
            s.data.len(),
            s.backend
        )));
    }
    s.backend.check_dims(s.height, s.width)?;
    let rows = inverse_rows(s.backend, &s.to_rows(), s.height, s.width);
    FeatureMap::from_matrix(s.height, s.width, rows)
}

/// Orthonormal DCT-II matrix: `D[u][x] = α(u) cos(π(2x+1)u / 2N)`.
pub fn dct_matrix(n: usize) -> Matrix {
    let a0 = (1.0 / n as f64).sqrt();
    let ak = (2.0 / n as f64).sqrt();
    Matrix::from_fn(n, n, |u, x| {
        let alpha = if u == 0 { a0 } else { ak };
        alpha * (PI * (2 * x + 1) as f64 * u as f64 / (2 * n) as f64).cos()
    })
}

/// Single-level orthonormal Haar analysis matrix: averages in the first half
/// of the output, details in the second.
pub fn haar_matrix(n: usize) -> Matrix {
    assert!(n.is_multiple_of(2), "haar matrix needs even size");
    let half = n / 2;
    let mut m = Matrix::zeros(n, n);
    for k in 0..half {
        m[(k, 2 * k)] = FRAC_1_SQRT_2;
        m[(k, 2 * k + 1)] = FRAC_1_SQRT_2;
        m[(half + k, 2 * k)] = FRAC_1_SQRT_2;
        m[(half + k, 2 * k + 1)] = -FRAC_1_SQRT_2;
    }
    m
}

fn real_axis_matrix(backend: Backend, n: usize) -> Matrix {
    match backend {
        Backend::Dct => dct_matrix(n),
        Backend::Haar => haar_matrix(n),
        Backend::Fft => unreachable!("fft axes are complex"),
    }
}

/// Forward transform on the `(H·W) × c` row representation.
pub fn forward_rows(backend: Backend, x: &Matrix, h: usize, w: usize) -> Matrix {
    match backend {
        Backend::Fft => fft_forward(x, h, w),
        _ => separable(x, h, w, &real_axis_matrix(backend, h), &real_axis_matrix(backend, w)),
    }
}

/// Inverse transform on the row representation. Also the adjoint of
/// [`forward_rows`].
pub fn inverse_rows(backend: Backend, y: &Matrix, h: usize, w: usize) -> Matrix {
    match backend {
        Backend::Fft => fft_inverse_real(y, h, w),
        _ => separable(
            y,
            h,
            w,
            &real_axis_matrix(backend, h).transpose(),
            &real_axis_matrix(backend, w).transpose(),
        ),
    }
}

/// `Y[(u,v), c] = Σ_h Σ_w A_h[u,h] · A_w[v,w] · X[(h,w), c]`, evaluated
/// width-first then height.
pub(crate) fn separable(x: &Matrix, h: usize, w: usize, a_h: &Matrix, a_w: &Matrix) -> Matrix {
    let c = x.cols();
    assert_eq!(x.rows(), h * w);
    let mut tmp = Matrix::zeros(h * w, c);
    for row in 0..h {
        for v in 0..w {
            let out = tmp.row_mut(row * w + v);
            for col in 0..w {
                let a = a_w[(v, col)];
                if a == 0.0 {
                    continue;
                }
                for (o, &xv) in out.iter_mut().zip(x.row(row * w + col)) {
                    *o += a * xv;
                }
            }
        }
    }
    let mut out = Matrix::zeros(h * w, c);
    for u in 0..h {
        for row in 0..h {
            let a = a_h[(u, row)];
            if a == 0.0 {
                continue;
            }
            for v in 0..w {
                let src = tmp.row(row * w + v).to_vec();
                for (o, xv) in out.row_mut(u * w + v).iter_mut().zip(src) {
                    *o += a * xv;
                }
            }
        }
    }
    out
}

/// Unitary DFT matrix; `sign = -1` for the forward transform.
fn dft_matrix(n: usize, sign: f64) -> Vec<Complex64> {
    let scale = 1.0 / (n as f64).sqrt();
    let mut m = Vec::with_capacity(n * n);
    for k in 0..n {
        for j in 0..n {
            // reduce the phase index first so large n keeps full precision
            let phase = ((k * j) % n) as f64 * 2.0 * PI / n as f64;
            m.push(Complex64::from_polar(scale, sign * phase));
        }
    }
    m
}

fn complex_separable(x: &[Complex64], h: usize, w: usize, c: usize, sign: f64) -> Vec<Complex64> {
    let fw = dft_matrix(w, sign);
    let fh = dft_matrix(h, sign);
    let mut tmp = vec![Complex64::new(0.0, 0.0); h * w * c];
    for row in 0..h {
        for v in 0..w {
            for col in 0..w {
                let a = fw[v * w + col];
                let src = (row * w + col) * c;
                let dst = (row * w + v) * c;
                for ch in 0..c {
                    tmp[dst + ch] += a * x[src + ch];
                }
            }
        }
    }
    let mut out = vec![Complex64::new(0.0, 0.0); h * w * c];
    for u in 0..h {
        for row in 0..h {
            let a = fh[u * h + row];
            for v in 0..w {
                let src = (row * w + v) * c;
                let dst = (u * w + v) * c;
                for ch in 0..c {
                    out[dst + ch] += a * tmp[src + ch];
                }
            }
        }
    }
    out
}

fn fft_forward(x: &Matrix, h: usize, w: usize) -> Matrix {
    let c = x.cols();
    let cells = h * w;
    let input: Vec<Complex64> = x.as_slice().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let spec = complex_separable(&input, h, w, c, -1.0);
    let mut out = Matrix::zeros(2 * cells, c);
    for cell in 0..cells {
        for ch in 0..c {
            let z = spec[cell * c + ch];
            out[(cell, ch)] = z.re;
            out[(cells + cell, ch)] = z.im;
        }
    }
    out
}

/// `Re(F⁻¹ (a + i b))` for the stacked `[a; b]` representation. This is the
/// real-linear adjoint of [`fft_forward`] because the DFT is unitary.
fn fft_inverse_real(y: &Matrix, h: usize, w: usize) -> Matrix {
    let c = y.cols();
    let cells = h * w;
    assert_eq!(y.rows(), 2 * cells);
    let mut input = Vec::with_capacity(cells * c);
    for cell in 0..cells {
        for ch in 0..c {
            input.push(Complex64::new(y[(cell, ch)], y[(cells + cell, ch)]));
        }
    }
    let spatial = complex_separable(&input, h, w, c, 1.0);
    Matrix::new_unchecked(cells, c, spatial.into_iter().map(|z| z.re).collect())
}
