//! Binary PPM/PGM images and the raw tensor dump format.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{dtype_size, Scalar, Shape4, Tensor};

pub const TENSOR_MAGIC: &[u8; 8] = b"HRNFTNSR";

/// 8-bit image, interleaved channels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 (PGM) or 3 (PPM).
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0; width * height * channels],
        }
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }
}

pub fn encode_pnm(img: &Image) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Data(format!("cannot store {c}-channel image as PNM"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    Ok(out)
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated PNM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Data(format!("unsupported PNM magic `{m}`"))),
    };
    let num = |s: String| s.parse::<usize>().map_err(|_| Error::Data(format!("bad PNM header field `{s}`")));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(Error::Data(format!("only 8-bit PNM supported, maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let len = width * height * channels;
    if bytes.len() < start + len {
        return Err(Error::Data("truncated PNM raster".into()));
    }
    Ok(Image {
        width,
        height,
        channels,
        data: bytes[start..start + len].to_vec(),
    })
}

pub fn write_pnm(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_pnm(img)?)?;
    Ok(())
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    decode_pnm(&std::fs::read(path)?)
}

/// Sequential little-endian reader over a byte buffer.
pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8], what: &'static str) -> Self {
        ByteReader { bytes, pos: 0, what }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Data(format!("truncated {}", self.what)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Appends dtype code, shape and payload.
pub fn encode_tensor_body<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.push(T::DTYPE_CODE);
    for d in t.shape().dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Reads a body written by [`encode_tensor_body`], converting to `T`.
pub fn decode_tensor_body<T: Scalar>(r: &mut ByteReader<'_>) -> Result<Tensor<T>> {
    let code = r.u8()?;
    let size = dtype_size(code).ok_or_else(|| Error::Data(format!("unknown dtype code {code}")))?;
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = usize::try_from(r.u64()?).map_err(|_| Error::Data("tensor dimension overflow".into()))?;
    }
    let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
    let bytes = dims
        .iter()
        .try_fold(size, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Data("tensor size overflow".into()))?;
    let payload = r.take(bytes)?;
    let data: Vec<T> = if code == T::DTYPE_CODE {
        payload.chunks_exact(size).map(T::read_le).collect()
    } else if code == f32::DTYPE_CODE {
        payload.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect()
    } else {
        payload.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect()
    };
    Tensor::from_vec(shape, data)
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = TENSOR_MAGIC.to_vec();
    encode_tensor_body(t, &mut out);
    out
}

pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = ByteReader::new(bytes, "tensor file");
    if r.take(8)? != TENSOR_MAGIC {
        return Err(Error::Data("not a tensor file (bad magic)".into()));
    }
    let t = decode_tensor_body(&mut r)?;
    if !r.is_at_end() {
        return Err(Error::Data("trailing bytes after tensor payload".into()));
    }
    Ok(t)
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode_tensor(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pnm_header_with_comment() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x07\x09";
        let img = decode_pnm(bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 1, 1));
        assert_eq!(img.data, vec![7, 9]);
    }

    #[test]
    fn pnm_rejects_bad_input() {
        assert!(decode_pnm(b"P3\n1 1\n255\n1 2 3").is_err());
        assert!(decode_pnm(b"P6\n2 2\n255\n\x00").is_err());
        assert!(decode_pnm(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }

    #[test]
    fn tensor_layout() {
        let t = Tensor::from_vec(Shape4::new(1, 1, 1, 2), vec![1.0f32, -2.0]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..8], b"HRNFTNSR");
        assert_eq!(b[8], 1);
        assert_eq!(b.len(), 8 + 1 + 32 + 8);
        assert_eq!(&b[41..45], &1.0f32.to_le_bytes());
        assert!(decode_tensor::<f32>(&b[..b.len() - 1]).is_err());
        let wide: Tensor<f64> = decode_tensor(&b).unwrap();
        assert_eq!(wide.data(), &[1.0, -2.0]);
    }

    proptest! {
        #[test]
        fn pnm_round_trip(w in 1usize..9, h in 1usize..9, rgb in prop::bool::ANY, seed in 0u8..255) {
            let c = if rgb { 3 } else { 1 };
            let mut img = Image::new(w, h, c);
            for (i, v) in img.data.iter_mut().enumerate() {
                *v = (i as u8).wrapping_mul(31).wrapping_add(seed);
            }
            prop_assert_eq!(decode_pnm(&encode_pnm(&img).unwrap()).unwrap(), img);
        }

        #[test]
        fn tensor_round_trip_bit_exact(v in proptest::collection::vec(proptest::num::f64::ANY, 6)) {
            let t = Tensor::from_vec(Shape4::new(1, 2, 3, 1), v).unwrap();
            let back: Tensor<f64> = decode_tensor(&encode_tensor(&t)).unwrap();
            let a: Vec<u64> = t.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = back.data().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
