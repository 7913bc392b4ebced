//! Flat CSV serialization of complex matrices for fixture reuse.
//!
//! One `re,im` pair per line, row-major within a matrix; multi-tap channels
//! append their tap blocks in order `l = 0..L-1`. Dimensions are not stored;
//! readers supply them.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;

use crate::channel::WidebandChannel;
use crate::training::TrainingBlock;
use crate::{Error, Result};

pub fn write_complex_matrix(path: &Path, m: &Array2<Complex64>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in m.iter() {
        writeln!(f, "{:.17e},{:.17e}", v.re, v.im)?;
    }
    Ok(())
}

pub fn read_complex_matrix(path: &Path, rows: usize, cols: usize) -> Result<Array2<Complex64>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut values = Vec::with_capacity(rows * cols);
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (re, im) = line
            .split_once(',')
            .ok_or_else(|| Error::InvalidArgument(format!("bad fixture line: {line}")))?;
        let re: f64 = re
            .trim()
            .parse()
            .map_err(|e| Error::InvalidArgument(format!("bad real part: {e}")))?;
        let im: f64 = im
            .trim()
            .parse()
            .map_err(|e| Error::InvalidArgument(format!("bad imaginary part: {e}")))?;
        values.push(Complex64::new(re, im));
    }
    if values.len() != rows * cols {
        return Err(Error::InvalidDimension(format!(
            "fixture holds {} entries, expected {}",
            values.len(),
            rows * cols
        )));
    }
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| Error::InvalidDimension(e.to_string()))
}

/// Serialize channel taps, block order `l = 0..L-1`, each row-major.
pub fn write_channel(path: &Path, h: &WidebandChannel) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for tap in &h.taps {
        for v in tap.iter() {
            writeln!(f, "{:.17e},{:.17e}", v.re, v.im)?;
        }
    }
    Ok(())
}

pub fn read_channel(
    path: &Path,
    nrx: usize,
    ntx: usize,
    taps: usize,
    symbol_period: f64,
) -> Result<WidebandChannel> {
    let flat = read_complex_matrix(path, taps * nrx, ntx)?;
    let mut out = Vec::with_capacity(taps);
    for ell in 0..taps {
        out.push(flat.slice(ndarray::s![ell * nrx..(ell + 1) * nrx, ..]).to_owned());
    }
    Ok(WidebandChannel { taps: out, symbol_period })
}

pub fn write_training(path: &Path, t: &TrainingBlock) -> Result<()> {
    write_complex_matrix(path, &t.t)
}

pub fn read_training(path: &Path, ntx: usize, np: usize, power: f64) -> Result<TrainingBlock> {
    Ok(TrainingBlock {
        t: read_complex_matrix(path, ntx, np)?,
        power,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{sample_rays, synthesize_taps, ChannelGenParams};
    use crate::training::{gen_training, TrainingKind};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn channel_and_training_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = ChannelGenParams {
            n_clusters: 2,
            rays_per_cluster: 3,
            angle_spread: 0.1,
            delay_spread_max: 1e-8,
            nrx: 4,
            ntx: 3,
            taps: 2,
            symbol_period: 1e-8,
        };
        let mut rng = StdRng::seed_from_u64(1);
        let h = synthesize_taps(&sample_rays(&p, &mut rng).unwrap(), &p).unwrap();
        let path = dir.path().join("h.csv");
        write_channel(&path, &h).unwrap();
        let back = read_channel(&path, 4, 3, 2, 1e-8).unwrap();
        for (a, b) in h.taps.iter().zip(back.taps.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).norm() < 1e-15);
            }
        }

        let t = gen_training(TrainingKind::IidGaussian, 3, 8, 1.5, &mut rng).unwrap();
        let tp = dir.path().join("t.csv");
        write_training(&tp, &t).unwrap();
        let tb = read_training(&tp, 3, 8, 1.5).unwrap();
        for (x, y) in t.t.iter().zip(tb.t.iter()) {
            assert!((x - y).norm() < 1e-15);
        }
        // Dimension mismatch is rejected.
        assert!(read_training(&tp, 4, 8, 1.5).is_err());
    }
}
