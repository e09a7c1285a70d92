//! 16-bit portable graymap export with a sidecar recording the physical
//! window, replacing colorbar figures at desk scale.

use std::fs;
use std::path::Path;

use fps_core::error::Result;

/// Write a P5 graymap (maxval 65535, big-endian samples per the PNM spec)
/// windowed to `[lo, hi]`, plus `<path>.window.tsv` with the window bounds.
pub fn write_pgm16(path: &Path, data: &[f64], h: usize, w: usize, lo: f64, hi: f64) -> Result<()> {
    let mut bytes = format!("P5\n{w} {h}\n65535\n").into_bytes();
    let range = if hi > lo { hi - lo } else { 1.0 };
    for &v in data {
        let t = ((v - lo) / range).clamp(0.0, 1.0);
        let q = (t * 65535.0).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, bytes)?;
    let sidecar = format!("window_lo\twindow_hi\n{lo:.9e}\t{hi:.9e}\n");
    fs::write(path.with_extension("pgm.window.tsv"), sidecar)?;
    Ok(())
}
