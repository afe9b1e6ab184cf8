//! `GT01` binary tensor dumps: magic, four little-endian `u32` dims, raw
//! little-endian `f32` payload in `C, G, H, W` order.

use std::io::{Read, Write};

use super::{GroupDims, GroupTensor};
use crate::error::{Error, Result};

pub const DUMP_MAGIC: &[u8; 4] = b"GT01";

pub fn write_dump<W: Write>(out: &mut W, t: &GroupTensor) -> Result<()> {
    let d = t.dims();
    let mut buf = Vec::with_capacity(20 + 4 * d.len());
    buf.extend_from_slice(DUMP_MAGIC);
    for v in [d.channels, d.order, d.height, d.width] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_dump<R: Read>(input: &mut R) -> Result<GroupTensor> {
    let mut head = [0u8; 20];
    input.read_exact(&mut head)?;
    if &head[..4] != DUMP_MAGIC {
        return Err(Error::Format {
            what: "tensor dump",
            msg: format!("bad magic {:?}", &head[..4]),
        });
    }
    let dim = |i: usize| u32::from_le_bytes(head[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let dims = GroupDims::new(dim(0), dim(1), dim(2), dim(3)).map_err(|e| Error::Format {
        what: "tensor dump",
        msg: e.to_string(),
    })?;
    let mut payload = vec![0u8; 4 * dims.len()];
    input.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    GroupTensor::new(dims, data)
}
