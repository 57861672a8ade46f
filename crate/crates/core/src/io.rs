//! Binary tensor files (`MTK1`) and PGM previews.
//!
//! `MTK1` layout, all integers little-endian:
//!
//! ```text
//! b"MTK1" | u32 rank | rank x u32 extents | prod(extents) x f64 values (row-major)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"MTK1";

/// Upper bound on a declared element count, so a corrupt header cannot
/// trigger a huge allocation.
const MAX_ELEMENTS: usize = 1 << 32;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::Format(format!("extent {e} exceeds u32")))?;
        w.write_all(&e.to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}, expected MTK1")));
    }
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("unsupported tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count = 1usize;
    for _ in 0..rank {
        let e = read_u32(r)? as usize;
        count = count.saturating_mul(e);
        shape.push(e);
    }
    if count == 0 || count > MAX_ELEMENTS {
        return Err(Error::Format(format!("invalid tensor extents {shape:?}")));
    }
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let f =
        File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut r = BufReader::new(f);
    let t = read_tensor(&mut r)?;
    if r.read(&mut [0u8])? != 0 {
        return Err(Error::Format(format!("{}: trailing bytes after tensor", path.display())));
    }
    Ok(t)
}

/// Encodes an `[H, W]` (or `[1, H, W]`) tensor as binary PGM (P5), mapping
/// the tensor's min..max linearly onto 0..255. A constant tensor maps to 0.
pub fn encode_pgm(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match t.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        s => return Err(Error::Shape(format!("PGM needs a single plane, got {s:?}"))),
    };
    let (lo, hi) = (t.min(), t.max());
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn save_pgm(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pgm(t)?)?;
    Ok(())
}
