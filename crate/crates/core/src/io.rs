//! Little-endian cursor shared by the binary readers.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Parse {
                offset: self.pos,
                reason: format!("truncated: need {n} bytes, {} left", self.remaining()),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub(crate) fn put_blob(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.shape().len());
    for &e in t.shape() {
        put_u32(out, e);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_blob(r: &mut Reader<'_>) -> Result<Tensor> {
    let at = r.offset();
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 4 {
        return Err(Error::Parse {
            offset: at,
            reason: format!("implausible tensor rank {rank}"),
        });
    }
    let shape = (0..rank)
        .map(|_| r.u32().map(|e| e as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    if n == 0 || n > r.remaining() / 8 {
        return Err(Error::Parse {
            offset: r.offset(),
            reason: format!("tensor {shape:?} exceeds remaining input"),
        });
    }
    let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    Tensor::new(shape, data).map_err(|e| Error::Parse {
        offset: at,
        reason: e.to_string(),
    })
}
