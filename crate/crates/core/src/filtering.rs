//! Gaussian band-pass gain grids and the causal / non-causal spectrum split.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{Backend, Spectrum};

pub const DEFAULT_RL: f64 = 0.2;
pub const DEFAULT_RH: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    /// Difference of Gaussians: drops both spectral extremes.
    BandPass,
    RemoveLowOnly,
    RemoveHighOnly,
    Identity,
}

impl FilterMode {
    pub const ALL: [FilterMode; 4] = [
        FilterMode::Identity,
        FilterMode::RemoveLowOnly,
        FilterMode::RemoveHighOnly,
        FilterMode::BandPass,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FilterMode::BandPass => "band-pass",
            FilterMode::RemoveLowOnly => "remove-low-only",
            FilterMode::RemoveHighOnly => "remove-high-only",
            FilterMode::Identity => "identity",
        }
    }
}

impl fmt::Display for FilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "band-pass" | "bandpass" | "lhf" => Ok(FilterMode::BandPass),
            "remove-low-only" | "remove-low" | "lf" => Ok(FilterMode::RemoveLowOnly),
            "remove-high-only" | "remove-high" | "hf" => Ok(FilterMode::RemoveHighOnly),
            "identity" | "none" => Ok(FilterMode::Identity),
            other => Err(Error::Config(format!("unknown filter mode '{other}'"))),
        }
    }
}

/// Filter settings independent of the grid size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub rl: f64,
    pub rh: f64,
    pub mode: FilterMode,
    pub backend: Backend,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            rl: DEFAULT_RL,
            rh: DEFAULT_RH,
            mode: FilterMode::BandPass,
            backend: Backend::Dct,
        }
    }
}

impl FilterConfig {
    pub fn build(&self, h: usize, w: usize) -> Result<BandPassFilter> {
        BandPassFilter::for_backend(self.backend, self.rl, self.rh, h, w, self.mode)
    }
}

/// Gain grid `G(u, v)` laid out to match a spectrum of the given backend.
#[derive(Debug, Clone, PartialEq)]
pub struct BandPassFilter {
    rl: f64,
    rh: f64,
    height: usize,
    width: usize,
    mode: FilterMode,
    backend: Backend,
    gain: Vec<f64>,
}

/// Causal and non-causal parts of a spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalSplit {
    pub causal: Spectrum,
    pub noncausal: Spectrum,
}

/// Band-pass gain at normalized radial frequency `rho`.
pub fn band_pass_gain(rho: f64, rl: f64, rh: f64) -> f64 {
    let r2 = rho * rho;
    (-r2 / (2.0 * rh * rh)).exp() - (-r2 / (2.0 * rl * rl)).exp()
}

fn mode_gain(mode: FilterMode, rho: f64, rl: f64, rh: f64) -> f64 {
    let r2 = rho * rho;
    match mode {
        FilterMode::BandPass => band_pass_gain(rho, rl, rh),
        FilterMode::RemoveLowOnly => 1.0 - (-r2 / (2.0 * rl * rl)).exp(),
        FilterMode::RemoveHighOnly => (-r2 / (2.0 * rh * rh)).exp(),
        FilterMode::Identity => 1.0,
    }
}

fn validate(rl: f64, rh: f64, h: usize, w: usize, mode: FilterMode) -> Result<()> {
    if h < 2 || w < 2 {
        return Err(Error::Dimension(format!(
            "filter grid must be at least 2x2, got {h}x{w}"
        )));
    }
    if !rl.is_finite() || !rh.is_finite() || rl < 0.0 || rh < 0.0 {
        return Err(Error::Parameter(format!(
            "cutoffs must be finite and non-negative, got R_L={rl}, R_H={rh}"
        )));
    }
    match mode {
        FilterMode::BandPass => {
            if rl == 0.0 {
                return Err(Error::Parameter("band-pass needs R_L > 0".into()));
            }
            if rl >= rh {
                return Err(Error::Parameter(format!("band-pass needs R_L < R_H, got {rl} >= {rh}")));
            }
        }
        FilterMode::RemoveLowOnly if rl == 0.0 => {
            return Err(Error::Parameter("remove-low-only needs R_L > 0".into()));
        }
        FilterMode::RemoveHighOnly if rh == 0.0 => {
            return Err(Error::Parameter("remove-high-only needs R_H > 0".into()));
        }
        _ => {}
    }
    Ok(())
}

/// Builds a filter for the DCT layout.
pub fn build_filter(rl: f64, rh: f64, h: usize, w: usize, mode: FilterMode) -> Result<BandPassFilter> {
    BandPassFilter::for_backend(Backend::Dct, rl, rh, h, w, mode)
}

impl BandPassFilter {
    /// DCT: `ρ = √((u/(H−1))² + (v/(W−1))²)`.
    /// FFT: the same with each index replaced by its distance from the
    /// zero-frequency bin, normalized by `H/2` (resp. `W/2`).
    /// Haar: quadrant masks (LL low, HH high).
    pub fn for_backend(backend: Backend, rl: f64, rh: f64, h: usize, w: usize, mode: FilterMode) -> Result<Self> {
        validate(rl, rh, h, w, mode)?;
        if backend == Backend::Haar {
            backend.check_dims(h, w)?;
        }
        let mut gain = Vec::with_capacity(h * w);
        for u in 0..h {
            for v in 0..w {
                let g = match backend {
                    Backend::Dct => {
                        let y = u as f64 / (h - 1) as f64;
                        let x = v as f64 / (w - 1) as f64;
                        mode_gain(mode, (y * y + x * x).sqrt(), rl, rh)
                    }
                    Backend::Fft => {
                        let y = centered_distance(u, h) / (h as f64 / 2.0);
                        let x = centered_distance(v, w) / (w as f64 / 2.0);
                        mode_gain(mode, (y * y + x * x).sqrt(), rl, rh)
                    }
                    Backend::Haar => haar_gain(mode, u < h / 2, v < w / 2),
                };
                gain.push(g);
            }
        }
        Ok(Self {
            rl,
            rh,
            height: h,
            width: w,
            mode,
            backend,
            gain,
        })
    }

    pub fn rl(&self) -> f64 {
        self.rl
    }

    pub fn rh(&self) -> f64 {
        self.rh
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mode(&self) -> FilterMode {
        self.mode
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn gain(&self) -> &[f64] {
        &self.gain
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.gain[u * self.width + v]
    }

    /// Gain per spectrum row in the kernel row representation (FFT rows are
    /// stacked real-then-imaginary, so the grid repeats).
    pub fn row_gains(&self) -> Vec<f64> {
        match self.backend {
            Backend::Fft => self.gain.iter().chain(self.gain.iter()).copied().collect(),
            _ => self.gain.clone(),
        }
    }

    /// Writes the grid as `u,v,gain` CSV.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "u,v,gain")?;
        for u in 0..self.height {
            for v in 0..self.width {
                writeln!(out, "{u},{v},{}", self.at(u, v))?;
            }
        }
        Ok(())
    }
}

fn centered_distance(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        (n - k) as f64
    }
}

fn haar_gain(mode: FilterMode, low_rows: bool, low_cols: bool) -> f64 {
    let ll = low_rows && low_cols;
    let hh = !low_rows && !low_cols;
    let keep = match mode {
        FilterMode::Identity => true,
        FilterMode::RemoveLowOnly => !ll,
        FilterMode::RemoveHighOnly => !hh,
        FilterMode::BandPass => !ll && !hh,
    };
    if keep {
        1.0
    } else {
        0.0
    }
}

/// `causal = S ⊙ G`, `noncausal = S ⊙ (1 − G)`, identically across channels.
pub fn split(s: &Spectrum, filt: &BandPassFilter) -> Result<CausalSplit> {
    if s.height() != filt.height || s.width() != filt.width {
        return Err(Error::Validation(format!(
            "spectrum {}x{} does not match filter {}x{}",
            s.height(),
            s.width(),
            filt.height,
            filt.width
        )));
    }
    if s.backend() != filt.backend {
        return Err(Error::Validation(format!(
            "spectrum backend {} does not match filter layout {}",
            s.backend(),
            filt.backend
        )));
    }
    let c = s.channels();
    let per_cell = match s.backend() {
        Backend::Fft => 2 * c,
        _ => c,
    };
    let mut causal = Vec::with_capacity(s.data().len());
    let mut noncausal = Vec::with_capacity(s.data().len());
    for (cell, chunk) in s.data().chunks(per_cell).enumerate() {
        let g = filt.gain[cell];
        for &x in chunk {
            causal.push(x * g);
            noncausal.push(x * (1.0 - g));
        }
    }
    Ok(CausalSplit {
        causal: s.with_data(causal),
        noncausal: s.with_data(noncausal),
    })
}
