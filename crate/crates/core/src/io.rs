//! Binary file formats: raw arrays, checkpoint containers and token grids.
//!
//! All integers and floats are little-endian.
//!
//! * Raw array: magic `ARLV`, four `u32` dims, then `f32` values row-major.
//!   Parameter arrays use magic `ARLD` with `f64` payload so checkpoints
//!   round-trip bit-exactly.
//! * Checkpoint: magic `ARLC`, `u32` version, `u32` length + UTF-8 JSON
//!   config echo, `u32` parameter count, then per parameter a `u16` name
//!   length, the name, a `u8` rank and one `ARLD` array (unused dims are 1).
//! * Token grid: magic `ARLQ`, three `u32` compression factors, three `u32`
//!   grid dims, `u32` codebook size, then `u16` indices (W fastest).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VIDEO_MAGIC: &[u8; 4] = b"ARLV";
pub const PARAM_MAGIC: &[u8; 4] = b"ARLD";
pub const CKPT_MAGIC: &[u8; 4] = b"ARLC";
pub const TOKEN_MAGIC: &[u8; 4] = b"ARLQ";
pub const CKPT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    ctx: &'a str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], ctx: &'a str) -> Self {
        Reader { buf, pos: 0, ctx }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.ctx, "unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, m: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != m {
            return Err(Error::format(
                self.ctx,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(m)),
            ));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(self.ctx, "trailing bytes"));
        }
        Ok(())
    }
}

fn dims4(shape: &[usize]) -> Result<[u32; 4]> {
    if shape.len() > 4 {
        return Err(Error::format("array", format!("rank {} exceeds 4", shape.len())));
    }
    let mut d = [1u32; 4];
    for (i, &s) in shape.iter().enumerate() {
        d[i] = u32::try_from(s).map_err(|_| Error::format("array", "dimension too large"))?;
    }
    Ok(d)
}

/// Encodes a tensor of rank ≤ 4 as an `ARLV` (f32) array.
pub fn encode_video_array(t: &Tensor) -> Result<Vec<u8>> {
    let d = dims4(t.shape())?;
    let mut out = Vec::with_capacity(20 + 4 * t.numel());
    out.extend_from_slice(VIDEO_MAGIC);
    for x in d {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_video_array(buf: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(buf, "raw array");
    r.magic(VIDEO_MAGIC)?;
    let dims: Vec<usize> = (0..4).map(|_| r.u32().map(|x| x as usize)).collect::<Result<_>>()?;
    let n: usize = dims.iter().product();
    let raw = r.take(4 * n)?;
    r.done()?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(&dims, data)
}

pub fn write_video(path: &Path, t: &Tensor) -> Result<()> {
    write_bytes(path, &encode_video_array(t)?)
}

pub fn read_video(path: &Path) -> Result<Tensor> {
    decode_video_array(&read_bytes(path)?)
}

fn encode_param(out: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    let d = dims4(t.shape())?;
    out.push(t.rank() as u8);
    out.extend_from_slice(PARAM_MAGIC);
    for x in d {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn decode_param(r: &mut Reader<'_>) -> Result<Tensor> {
    let rank = r.u8()? as usize;
    r.magic(PARAM_MAGIC)?;
    let dims: Vec<usize> = (0..4).map(|_| r.u32().map(|x| x as usize)).collect::<Result<_>>()?;
    if rank > 4 || dims[rank..].iter().any(|&d| d != 1) {
        return Err(Error::format("checkpoint", "inconsistent parameter rank"));
    }
    let n: usize = dims.iter().product();
    let raw = r.take(8 * n)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&dims[..rank], data)
}

/// An in-memory checkpoint: config echo plus named parameters.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            encode_param(&mut out, t)?;
        }
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "checkpoint");
        r.magic(CKPT_MAGIC)?;
        let ver = r.u32()?;
        if ver != CKPT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {ver}")));
        }
        let n = r.u32()? as usize;
        let config = serde_json::from_slice(r.take(n)?)?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let nl = r.u16()? as usize;
            let name = String::from_utf8(r.take(nl)?.to_vec())
                .map_err(|_| Error::format("checkpoint", "parameter name is not UTF-8"))?;
            params.push((name, decode_param(&mut r)?));
        }
        r.done()?;
        Ok(Checkpoint { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_bytes(path)?)
    }
}

/// Header-level view of a token grid file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenFile {
    pub compression: [u32; 3],
    pub dims: [u32; 3],
    pub k: u32,
    pub indices: Vec<u16>,
}

impl TokenFile {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 2 * self.indices.len());
        out.extend_from_slice(TOKEN_MAGIC);
        for x in self.compression.iter().chain(self.dims.iter()) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&self.k.to_le_bytes());
        for &i in &self.indices {
            out.extend_from_slice(&i.to_le_bytes());
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "token file");
        r.magic(TOKEN_MAGIC)?;
        let mut h = [0u32; 7];
        for x in h.iter_mut() {
            *x = r.u32()?;
        }
        let n = (h[3] * h[4] * h[5]) as usize;
        let indices = (0..n).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
        r.done()?;
        Ok(TokenFile {
            compression: [h[0], h[1], h[2]],
            dims: [h[3], h[4], h[5]],
            k: h[6],
            indices,
        })
    }
}

/// Binary PPM with the frames of a `(T, H, W, 3)` video side by side.
pub fn encode_ppm_strip(video: &Tensor) -> Result<Vec<u8>> {
    if video.rank() != 4 || video.dim(3) != 3 {
        return Err(Error::validation("video", format!("expected (T, H, W, 3), got {:?}", video.shape())));
    }
    let (t, h, w) = (video.dim(0), video.dim(1), video.dim(2));
    let mut out = format!("P6\n{} {}\n255\n", t * w, h).into_bytes();
    let d = video.data();
    for y in 0..h {
        for f in 0..t {
            for x in 0..w {
                let o = ((f * h + y) * w + x) * 3;
                out.extend(d[o..o + 3].iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
            }
        }
    }
    Ok(out)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut v = Vec::new();
    f.read_to_end(&mut v).map_err(|e| Error::io(path, e))?;
    Ok(v)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn video_header_layout() {
        let t = Tensor::from_vec(&[1, 2, 1, 3], vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]);
        let b = encode_video_array(&t).unwrap();
        assert_eq!(&b[..4], b"ARLV");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(b.len(), 20 + 4 * 6);
        assert_eq!(decode_video_array(&b).unwrap(), t);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut b = encode_video_array(&Tensor::zeros(&[1, 1, 1, 1])).unwrap();
        b[0] = b'X';
        assert!(decode_video_array(&b).is_err());
    }

    #[test]
    fn checkpoint_is_bit_exact() {
        let ck = Checkpoint {
            config: serde_json::json!({"a": 1}),
            params: vec![
                ("w".into(), Tensor::from_vec(&[2, 2], vec![0.1, -1e-300, 3.0, f64::MIN_POSITIVE])),
                ("s".into(), Tensor::scalar(std::f64::consts::PI)),
            ],
        };
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        assert_eq!(back.config, ck.config);
        for ((n1, t1), (n2, t2)) in back.params.iter().zip(&ck.params) {
            assert_eq!(n1, n2);
            assert!(t1.bit_eq(t2));
        }
    }

    proptest! {
        #[test]
        fn token_file_round_trip(t in 1u32..4, h in 1u32..4, w in 1u32..4, seed in any::<u64>()) {
            let n = (t * h * w) as usize;
            let indices: Vec<u16> = (0..n).map(|i| ((seed >> (i % 48)) as u16) % 64).collect();
            let f = TokenFile { compression: [2, 2, 2], dims: [t, h, w], k: 64, indices };
            prop_assert_eq!(TokenFile::decode(&f.encode()).unwrap(), f);
        }
    }
}
