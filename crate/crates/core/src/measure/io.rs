use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{MeasureError, PathEnsemble};
use crate::Scalar;

const MAGIC: &[u8; 8] = b"MFCENS\0\x01";

/// Writes an ensemble in the little-endian binary layout
/// `magic | n | steps | d | time grid | data`, counts as `u64` and values as
/// `f64`.
pub fn write_ensemble<S: Scalar, W: Write>(
    e: &PathEnsemble<S>,
    mut w: W,
) -> Result<(), MeasureError> {
    w.write_all(MAGIC)?;
    for v in [e.len(), e.steps(), e.dim()] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    for v in e.time_grid().iter().chain(e.data()) {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, MeasureError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_ensemble<S: Scalar, R: Read>(mut r: R) -> Result<PathEnsemble<S>, MeasureError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(MeasureError::Format("bad magic".into()));
    }
    let n = read_u64(&mut r)? as usize;
    let steps = read_u64(&mut r)? as usize;
    let d = read_u64(&mut r)? as usize;
    let total = n
        .checked_mul(steps + 1)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| MeasureError::Format("header overflow".into()))?;
    let mut read_vals = |count: usize| -> Result<Vec<S>, MeasureError> {
        let mut out = Vec::with_capacity(count.min(1 << 24));
        let mut b = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut b)?;
            out.push(S::lit(f64::from_le_bytes(b)));
        }
        Ok(out)
    };
    let grid = read_vals(steps + 1)?;
    let data = read_vals(total)?;
    PathEnsemble::new_unchecked(n, d, grid, data)
}

pub fn write_ensemble_file<S: Scalar>(
    e: &PathEnsemble<S>,
    path: impl AsRef<Path>,
) -> Result<(), MeasureError> {
    write_ensemble(e, BufWriter::new(File::create(path)?))
}

pub fn read_ensemble_file<S: Scalar>(
    path: impl AsRef<Path>,
) -> Result<PathEnsemble<S>, MeasureError> {
    read_ensemble(BufReader::new(File::open(path)?))
}

/// Long-format CSV with header `particle,step,t,x0,...`.
pub fn write_ensemble_csv<S: Scalar, W: Write>(
    e: &PathEnsemble<S>,
    w: W,
) -> Result<(), MeasureError> {
    let mut w = BufWriter::new(w);
    write!(w, "particle,step,t")?;
    for j in 0..e.dim() {
        write!(w, ",x{j}")?;
    }
    writeln!(w)?;
    for i in 0..e.len() {
        for (k, t) in e.time_grid().iter().enumerate() {
            write!(w, "{i},{k},{t}")?;
            for v in e.state(i, k) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::uniform_grid;

    #[test]
    fn binary_round_trip() {
        let e = PathEnsemble::new(
            2,
            2,
            uniform_grid(1.0, 2),
            (0..12).map(|v| v as f64 * 0.1).collect(),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_ensemble(&e, &mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 24 + 8 * (3 + 12));
        let back: PathEnsemble<f64> = read_ensemble(&buf[..]).unwrap();
        assert_eq!(back, e);
        buf[0] = b'X';
        assert!(matches!(
            read_ensemble::<f64, _>(&buf[..]),
            Err(MeasureError::Format(_))
        ));
        assert!(read_ensemble::<f64, _>(&buf[..20]).is_err());
    }

    #[test]
    fn csv_layout() {
        let e = PathEnsemble::new(1, 1, vec![0.0, 0.5], vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_ensemble_csv(&e, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "particle,step,t,x0\n0,0,0,1\n0,1,0.5,2\n"
        );
    }
}
