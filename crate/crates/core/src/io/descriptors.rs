//! MVDF descriptor files and plain-text keypoint lists.
//!
//! MVDF layout, all little-endian: magic `MVDF`, version u32, count u32,
//! dim u32, `count * dim` f32 row-major, then `count` u32 keypoint indices.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MVDF";
const VERSION: u32 = 1;
/// Allowed deviation of a stored row norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorFile {
    pub descriptors: Vec<Vec<f64>>,
    pub keypoints: Vec<usize>,
}

impl DescriptorFile {
    pub fn new(descriptors: Vec<Vec<f64>>, keypoints: Vec<usize>) -> Result<Self> {
        if descriptors.len() != keypoints.len() {
            return Err(Error::shape(format!(
                "{} descriptors for {} keypoints",
                descriptors.len(),
                keypoints.len()
            )));
        }
        let dim = descriptors.first().map_or(0, Vec::len);
        for (i, d) in descriptors.iter().enumerate() {
            if d.len() != dim {
                return Err(Error::shape(format!("descriptor {i} has dimension {}, expected {dim}", d.len())));
            }
            let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::invalid(format!("descriptor {i} has norm {norm}, expected 1")));
            }
        }
        if keypoints.iter().any(|&k| k > u32::MAX as usize) {
            return Err(Error::invalid("keypoint index does not fit in u32"));
        }
        Ok(Self { descriptors, keypoints })
    }

    pub fn dim(&self) -> usize {
        self.descriptors.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        for v in [VERSION, self.len() as u32, self.dim() as u32] {
            out.write_all(&v.to_le_bytes())?;
        }
        for d in &self.descriptors {
            for &x in d {
                out.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        for &k in &self.keypoints {
            out.write_all(&(k as u32).to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R, path: &Path) -> Result<Self> {
        let short = |e: std::io::Error| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::format(path, "truncated descriptor file"),
            _ => e.into(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(short)?;
        if &magic != MAGIC {
            return Err(Error::format(path, "not an MVDF file"));
        }
        let mut word = [0u8; 4];
        let mut u32s = [0u32; 3];
        for v in &mut u32s {
            r.read_exact(&mut word).map_err(short)?;
            *v = u32::from_le_bytes(word);
        }
        let [version, count, dim] = u32s.map(|v| v as usize);
        if version != VERSION as usize {
            return Err(Error::format(path, format!("unsupported MVDF version {version}")));
        }
        let mut descriptors = Vec::with_capacity(count);
        for _ in 0..count {
            let mut row = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.read_exact(&mut word).map_err(short)?;
                row.push(f32::from_le_bytes(word) as f64);
            }
            descriptors.push(row);
        }
        let mut keypoints = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut word).map_err(short)?;
            keypoints.push(u32::from_le_bytes(word) as usize);
        }
        Self::new(descriptors, keypoints).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::format(path, e.to_string()))?;
        self.write_to(BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::format(path, e.to_string()))?;
        Self::read_from(BufReader::new(file), path)
    }
}

/// One keypoint index per line; blank lines and `#` comments are skipped.
pub fn read_keypoints(path: &Path) -> Result<Vec<usize>> {
    let file = File::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for (no, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let t = line.split('#').next().unwrap_or("").trim();
        if t.is_empty() {
            continue;
        }
        out.push(
            t.parse()
                .map_err(|_| Error::format(path, format!("line {}: bad keypoint index {t:?}", no + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_keypoints(path: &Path, keypoints: &[usize]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::format(path, e.to_string()))?);
    for k in keypoints {
        writeln!(out, "{k}")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DescriptorFile {
        let s = 0.5f64.sqrt();
        DescriptorFile::new(vec![vec![1.0, 0.0], vec![s, -s], vec![0.6, 0.8]], vec![4, 17, 2]).unwrap()
    }

    #[test]
    fn round_trip() {
        let f = sample();
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 3 * 2 * 4 + 3 * 4);
        assert_eq!(&buf[..4], b"MVDF");
        let back = DescriptorFile::read_from(&buf[..], Path::new("m")).unwrap();
        assert_eq!(back.keypoints, f.keypoints);
        for (a, b) in back.descriptors.iter().flatten().zip(f.descriptors.iter().flatten()) {
            assert_eq!(*a, *b as f32 as f64);
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.mvdf");
        f.save(&path).unwrap();
        assert_eq!(DescriptorFile::load(&path).unwrap(), back);
        let kp = dir.path().join("k.txt");
        write_keypoints(&kp, &f.keypoints).unwrap();
        assert_eq!(read_keypoints(&kp).unwrap(), f.keypoints);
    }

    #[test]
    fn rejects_bad_data() {
        assert!(DescriptorFile::new(vec![vec![2.0, 0.0]], vec![0]).is_err());
        assert!(DescriptorFile::new(vec![vec![1.0]], vec![]).is_err());
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        let e = DescriptorFile::read_from(&buf[..buf.len() - 2], Path::new("m")).unwrap_err();
        assert!(e.to_string().contains("truncated"));
        buf[0] = b'X';
        assert!(DescriptorFile::read_from(&buf[..], Path::new("m")).is_err());
    }
}
