//! Little-endian binary primitives shared by the artifact file formats
//! (PEMB embeddings, PCLS classifier, PROT prototypes, SVIT checkpoints).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub struct BinWriter<'a> {
    w: BufWriter<File>,
    path: &'a Path,
}

impl<'a> BinWriter<'a> {
    pub fn create(path: &'a Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(BinWriter {
            w: BufWriter::new(file),
            path,
        })
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.w.write_all(b).map_err(|e| Error::io(self.path, e))
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f32_slice(&mut self, vs: &[f32]) -> Result<()> {
        for &v in vs {
            self.bytes(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn f64_as_f32_slice(&mut self, vs: &[f64]) -> Result<()> {
        for &v in vs {
            self.bytes(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }
}

pub struct BinReader<'a> {
    r: BufReader<File>,
    path: &'a Path,
}

impl<'a> BinReader<'a> {
    pub fn open(path: &'a Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(BinReader {
            r: BufReader::new(file),
            path,
        })
    }

    pub fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.r
            .read_exact(&mut buf)
            .map_err(|e| Error::io(self.path, e))?;
        Ok(buf)
    }

    pub fn expect_magic(&mut self, magic: &str) -> Result<()> {
        let got = self.bytes(magic.len())?;
        if got != magic.as_bytes() {
            return Err(Error::Format {
                path: self.path.into(),
                expected: magic.into(),
                msg: format!("found {:?}", String::from_utf8_lossy(&got)),
            });
        }
        Ok(())
    }

    pub fn expect_version(&mut self, magic: &str, version: u32) -> Result<()> {
        let v = self.u32()?;
        if v != version {
            return Err(Error::Format {
                path: self.path.into(),
                expected: magic.into(),
                msg: format!("unsupported version {v}, expected {version}"),
            });
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.bytes(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f32_as_f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.f32_vec(n)?.into_iter().map(f64::from).collect())
    }
}
