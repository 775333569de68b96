use std::io::Write;

use crate::error::Result;
use crate::filtering::{split, BandPassFilter, FilterConfig};
use crate::spectral::{inverse, transform, FeatureMap};

/// Spatial causal and non-causal parts of a feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub causal: FeatureMap,
    pub noncausal: FeatureMap,
    pub filter: BandPassFilter,
    /// `max |causal + noncausal − input|`
    pub reconstruction_error: f64,
    pub input_energy: f64,
    pub causal_energy: f64,
    pub noncausal_energy: f64,
}

impl Decomposition {
    /// One `key=value` line per statistic.
    pub fn write_summary<W: Write>(&self, mut out: W) -> Result<()> {
        let f = &self.filter;
        writeln!(out, "height={}", self.causal.height())?;
        writeln!(out, "width={}", self.causal.width())?;
        writeln!(out, "channels={}", self.causal.channels())?;
        writeln!(out, "backend={}", f.backend())?;
        writeln!(out, "mode={}", f.mode())?;
        writeln!(out, "rl={}", f.rl())?;
        writeln!(out, "rh={}", f.rh())?;
        writeln!(out, "input_energy={}", self.input_energy)?;
        writeln!(out, "causal_energy={}", self.causal_energy)?;
        writeln!(out, "noncausal_energy={}", self.noncausal_energy)?;
        writeln!(out, "reconstruction_max_abs_error={:e}", self.reconstruction_error)?;
        Ok(())
    }
}

pub fn decompose(input: &FeatureMap, filter: &FilterConfig) -> Result<Decomposition> {
    let filt = filter.build(input.height(), input.width())?;
    let spectrum = transform(input, filt.backend())?;
    let parts = split(&spectrum, &filt)?;
    let causal = inverse(&parts.causal)?;
    let noncausal = inverse(&parts.noncausal)?;
    let reconstruction_error = causal
        .data()
        .iter()
        .zip(noncausal.data())
        .zip(input.data())
        .map(|((a, b), x)| (a + b - x).abs())
        .fold(0.0, f64::max);
    Ok(Decomposition {
        input_energy: input.norm_sq(),
        causal_energy: causal.norm_sq(),
        noncausal_energy: noncausal.norm_sq(),
        causal,
        noncausal,
        filter: filt,
        reconstruction_error,
    })
}
