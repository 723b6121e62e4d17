//! TSV reports and histogram plots.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{NoiseHistogram, BINS};

/// Appends `step, key, value` rows, writing the header for a new file.
pub struct MetricsLog {
    file: std::fs::File,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists();
        let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(file, "step\tkey\tvalue")?;
        }
        Ok(Self { file })
    }

    pub fn write(&mut self, step: u64, entries: &[(&str, f64)]) -> Result<()> {
        let mut buf = String::new();
        for (k, v) in entries {
            writeln!(buf, "{step}\t{k}\t{v}").expect("writing to a string");
        }
        self.file.write_all(buf.as_bytes())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}

/// Parses a metrics log back into `(step, key, value)` rows.
pub fn read_metrics(path: &Path) -> Result<Vec<(u64, String, f64)>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let c: Vec<&str> = l.split('\t').collect();
            let bad = || Error::data(path, format!("malformed metrics row `{l}`"));
            if c.len() != 3 {
                return Err(bad());
            }
            Ok((c[0].parse().map_err(|_| bad())?, c[1].to_string(), c[2].parse().map_err(|_| bad())?))
        })
        .collect()
}

pub fn write_tsv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = header.join("\t");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join("\t"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Overlaid bar plot of two normalized histograms: `a` in blue, `b` in red,
/// overlap in purple.
pub fn plot_histograms(a: &NoiseHistogram, b: &NoiseHistogram, path: &Path) -> Result<()> {
    const H: u32 = 200;
    const BAR: u32 = 2;
    let (pa, pb) = (a.normalized(), b.normalized());
    let peak = pa.iter().chain(&pb).copied().fold(0.0, f64::max).max(1e-12);
    let mut img = image::RgbImage::from_pixel(BINS as u32 * BAR, H, image::Rgb([255, 255, 255]));
    for i in 0..BINS {
        let ha = ((pa[i] / peak) * (H - 1) as f64).round() as u32;
        let hb = ((pb[i] / peak) * (H - 1) as f64).round() as u32;
        for dx in 0..BAR {
            let x = i as u32 * BAR + dx;
            for y in 0..H {
                let level = H - 1 - y;
                let color = match (level < ha, level < hb) {
                    (true, true) => [140, 60, 170],
                    (true, false) => [40, 90, 220],
                    (false, true) => [220, 60, 50],
                    (false, false) => continue,
                };
                img.put_pixel(x, y, image::Rgb(color));
            }
        }
        if i == BINS / 2 {
            for y in 0..H {
                img.put_pixel(i as u32 * BAR, y, image::Rgb([0, 0, 0]));
            }
        }
    }
    img.save(path).map_err(|e| Error::data(path, format!("cannot write plot: {e}")))
}
