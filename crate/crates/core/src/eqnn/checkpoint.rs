//! `REQ1` checkpoints: config text plus named tensor dumps.
//!
//! ```text
//! b"REQ1" | u32 config_len | config (key=value text) | u32 count
//!         | count × ( u32 name_len | name | GT01 dump )
//! ```
//!
//! Tensors of any rank are stored as four-dim dumps: leading axes are padded
//! with ones, or the middle axes merged. Shapes are recovered from the model
//! config on load, so only the element count must agree.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::gtensor::{read_dump, write_dump, GroupDims, GroupTensor, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"REQ1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn four_dims(shape: &[usize]) -> [usize; 4] {
    match *shape {
        [] => [1, 1, 1, 1],
        [a] => [1, 1, 1, a],
        [a, b] => [1, 1, a, b],
        [a, b, c] => [1, a, b, c],
        ref s => {
            let r = s.len();
            [s[0], s[1..r - 2].iter().product(), s[r - 2], s[r - 1]]
        }
    }
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        msg: msg.into(),
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, what: &str) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 1 << 24 {
        return Err(format_err(format!("{what} length {n} is implausible")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| format_err(format!("{what} is not UTF-8")))
}

pub fn write_checkpoint<W: Write>(out: &mut W, ck: &Checkpoint) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(ck.config.len() as u32).to_le_bytes())?;
    out.write_all(ck.config.as_bytes())?;
    out.write_all(&(ck.tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &ck.tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        let [c, g, h, w] = four_dims(t.shape());
        let gt = GroupTensor::new(GroupDims::new(c, g, h, w)?, t.data().to_vec())?;
        write_dump(out, &gt)?;
    }
    Ok(())
}

/// Tensors come back with their four stored dims; callers reshape as needed.
pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(format_err(format!("bad magic {magic:?}")));
    }
    let config = read_string(input, "config")?;
    let count = read_u32(input)? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = read_string(input, "tensor name")?;
        let gt = read_dump(input)?;
        let d = gt.dims();
        tensors.push((name, Tensor::new(vec![d.channels, d.order, d.height, d.width], gt.into_data())?));
    }
    Ok(Checkpoint { config, tensors })
}
