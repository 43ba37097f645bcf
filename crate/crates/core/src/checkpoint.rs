//! Binary checkpoint format.
//!
//! ```text
//! "FTTN"                      4 bytes magic
//! version                     u16 LE (currently 1)
//! N, chi, d, L, label_site    u32 LE each
//! per site:
//!   rank                      u8
//!   dims                      u32 LE x rank
//!   entries                   f64 LE x product(dims), row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{FttnError, Result};
use crate::feature_map::LOCAL_DIM;
use crate::model::{ModelShape, MpsClassifier};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FTTN";
pub const VERSION: u16 = 1;

pub fn encode(model: &MpsClassifier) -> Vec<u8> {
    let shape = model.shape();
    let mut out = Vec::with_capacity(26 + 8 * shape.parameter_count() + 16 * shape.n_sites);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        shape.n_sites,
        shape.bond_dim,
        LOCAL_DIM,
        shape.num_classes,
        shape.label_site,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for site in model.sites() {
        out.push(site.rank() as u8);
        for &dim in site.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in site.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<MpsClassifier> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(FttnError::format(0, format!("bad magic {magic:?}, expected \"FTTN\"")));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(FttnError::format(4, format!("unsupported version {version}")));
    }
    let n_sites = r.u32("site count")? as usize;
    let chi = r.u32("bond dimension")? as usize;
    let header_end = r.pos as u64;
    let d = r.u32("local dimension")? as usize;
    let classes = r.u32("class count")? as usize;
    let label_site = r.u32("label site")? as usize;
    if d != LOCAL_DIM {
        return Err(FttnError::format(header_end, format!("local dimension {d}, expected {LOCAL_DIM}")));
    }
    let shape = ModelShape::with_label_site(n_sites, chi, classes, label_site)
        .map_err(|e| FttnError::format(6, e.to_string()))?;

    let mut sites = Vec::with_capacity(n_sites);
    for k in 0..n_sites {
        let site_start = r.pos as u64;
        let rank = r.take(1, "site rank")?[0] as usize;
        let dims = (0..rank)
            .map(|_| r.u32("site dimension").map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let expected = shape.site_dims(k).weight_shape();
        if dims != expected {
            return Err(FttnError::format(
                site_start,
                format!("site {k} has shape {dims:?}, expected {expected:?}"),
            ));
        }
        let len: usize = dims.iter().product();
        let data_start = r.pos as u64;
        let raw = r.take(8 * len, "site entries")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        sites.push(Tensor::new(dims, data).map_err(|e| FttnError::format(data_start, e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(FttnError::format(
            r.pos as u64,
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    MpsClassifier::from_sites(shape, sites)
}

pub fn save_checkpoint(model: &MpsClassifier, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model)).map_err(|e| FttnError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MpsClassifier> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| FttnError::io(path, e))?;
    decode(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(FttnError::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {available} left"),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}
