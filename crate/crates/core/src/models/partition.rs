use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DPCA";
const VERSION: u32 = 1;
/// magic + version + machine + n + d + seed
pub const HEADER_BYTES: usize = 4 + 4 + 4 + 8 + 8 + 8;

/// One machine's sample block; rows are samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    machine: usize,
    seed: u64,
    data: DMatrix<f64>,
}

impl Partition {
    pub fn new(machine: usize, seed: u64, data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::invalid("partition must have at least one row and one column"));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("partition {machine} has non-finite values")));
        }
        if u32::try_from(machine).is_err() {
            return Err(Error::invalid(format!("machine index {machine} exceeds u32")));
        }
        Ok(Partition { machine, seed, data })
    }

    pub fn machine(&self) -> usize {
        self.machine
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }

    /// Stacks the rows of all partitions, in the given order. The result keeps
    /// the first partition's machine index and seed.
    pub fn concat(parts: &[Partition]) -> Result<Partition> {
        let first = parts.first().ok_or_else(|| Error::invalid("no partitions to concatenate"))?;
        let d = first.dim();
        if let Some(p) = parts.iter().find(|p| p.dim() != d) {
            return Err(Error::invalid(format!(
                "partition {} has d = {}, expected {d}",
                p.machine,
                p.dim()
            )));
        }
        let total: usize = parts.iter().map(Partition::n).sum();
        let mut data = DMatrix::zeros(total, d);
        let mut row = 0;
        for p in parts {
            data.rows_mut(row, p.n()).copy_from(&p.data);
            row += p.n();
        }
        Partition::new(first.machine, first.seed, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, d) = self.data.shape();
        let mut out = Vec::with_capacity(HEADER_BYTES + 8 * n * d);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.machine as u32).to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(d as u64).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for i in 0..n {
            for j in 0..d {
                out.extend_from_slice(&self.data[(i, j)].to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Decode {
                offset: 0,
                reason: "bad magic, expected \"DPCA\"".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Decode {
                offset: 4,
                reason: format!("unsupported version {version}"),
            });
        }
        let machine = r.u32()? as usize;
        let n = r.u64()? as usize;
        let d = r.u64()? as usize;
        let seed = r.u64()?;
        let expected = n
            .checked_mul(d)
            .and_then(|nd| nd.checked_mul(8))
            .ok_or_else(|| Error::Decode {
                offset: 12,
                reason: format!("n = {n}, d = {d} overflow"),
            })?;
        if buf.len() - HEADER_BYTES != expected {
            return Err(Error::Decode {
                offset: buf.len().min(HEADER_BYTES + expected),
                reason: format!("payload is {} bytes, header implies {expected}", buf.len() - HEADER_BYTES),
            });
        }
        let mut data = DMatrix::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                data[(i, j)] = r.f64()?;
            }
        }
        Partition::new(machine, seed, data)
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// One line per sample, `d` comma-separated values, no header.
    /// Values use Rust's shortest round-trip formatting, so reading back is exact.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for row in self.data.row_iter() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, machine: usize, seed: u64) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut values = Vec::new();
        let mut d = None;
        let mut n = 0;
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
            match d {
                None => d = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(Error::invalid(format!(
                        "{}:{}: expected {d} values, found {}",
                        path.display(),
                        lineno + 1,
                        row.len()
                    )))
                }
                _ => {}
            }
            values.extend(row);
            n += 1;
        }
        let d = d.ok_or_else(|| Error::invalid(format!("{}: no samples", path.display())))?;
        Partition::new(machine, seed, DMatrix::from_row_slice(n, d, &values))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < len {
            return Err(Error::Decode {
                offset: self.pos,
                reason: format!("need {len} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let out = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Partition {
        Partition::new(3, 42, DMatrix::from_fn(4, 2, |i, j| i as f64 - 0.1 * j as f64 + 1e-17)).unwrap()
    }

    #[test]
    fn binary_roundtrip_and_size() {
        let p = sample();
        let bytes = p.to_bytes();
        assert_eq!(bytes.len(), HEADER_BYTES + 4 * 2 * 8);
        assert_eq!(&bytes[..4], b"DPCA");
        assert_eq!(Partition::from_bytes(&bytes).unwrap(), p);
    }

    #[test]
    fn truncated_binary_rejected() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 10, HEADER_BYTES, bytes.len() - 1] {
            assert!(matches!(Partition::from_bytes(&bytes[..cut]), Err(Error::Decode { .. })));
        }
    }

    #[test]
    fn csv_roundtrip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let p = sample();
        p.write_csv(&path).unwrap();
        assert_eq!(Partition::read_csv(&path, 3, 42).unwrap(), p);
    }

    #[test]
    fn concat_stacks_rows() {
        let a = Partition::new(0, 1, DMatrix::from_element(2, 3, 1.0)).unwrap();
        let b = Partition::new(1, 1, DMatrix::from_element(1, 3, 2.0)).unwrap();
        let c = Partition::concat(&[a, b]).unwrap();
        assert_eq!(c.n(), 3);
        assert_eq!(c.data()[(2, 0)], 2.0);
    }
}
