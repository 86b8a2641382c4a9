//! File formats: the raw tensor format, binary PGM (P5) and binary PPM (P6).
//!
//! A raw tensor file is one JSON header line `{"dtype":"f32","shape":[C,H,W]}`
//! followed by the little-endian payload in `Tensor3` layout order. Both
//! `f32` and `f64` payloads are accepted.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

#[derive(Serialize, Deserialize)]
struct RawHeader {
    dtype: DType,
    shape: [usize; 3],
}

pub fn encode_raw(t: &Tensor3, dtype: DType) -> Vec<u8> {
    let header =
        serde_json::to_string(&RawHeader { dtype, shape: t.shape() }).expect("header serialization cannot fail");
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut out = Vec::with_capacity(header.len() + 1 + t.len() * width);
    out.extend_from_slice(header.as_bytes());
    out.push(b'\n');
    for &v in t.data() {
        match dtype {
            DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

pub fn decode_raw(bytes: &[u8], path: &Path) -> Result<Tensor3> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::malformed(path, "missing header line"))?;
    let header: RawHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::malformed(path, format!("bad header: {e}")))?;
    let [c, h, w] = header.shape;
    let n = c.checked_mul(h).and_then(|v| v.checked_mul(w)).ok_or_else(|| Error::malformed(path, "shape overflows"))?;
    let payload = &bytes[nl + 1..];
    let width = match header.dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    if payload.len() != n * width {
        return Err(Error::malformed(path, format!("payload has {} bytes, shape needs {}", payload.len(), n * width)));
    }
    let data: Vec<f64> = match header.dtype {
        DType::F32 => payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect(),
        DType::F64 => payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
    };
    Tensor3::new(c, h, w, data).map_err(|e| Error::malformed(path, e.to_string()))
}

pub fn write_raw(path: impl AsRef<Path>, t: &Tensor3, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_raw(t, dtype)).map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<Tensor3> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw(&bytes, path)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Netpbm binary image: `P5` for one channel, `P6` for three.
pub fn encode_netpbm(t: &Tensor3) -> Result<Vec<u8>> {
    let magic = match t.channels() {
        1 => "P5",
        3 => "P6",
        n => return Err(Error::WrongChannelCount { expected: 3, found: n }),
    };
    let (h, w) = (t.height(), t.width());
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..t.channels() {
                out.push(to_byte(t.get(c, y, x)));
            }
        }
    }
    Ok(out)
}

pub fn decode_netpbm(bytes: &[u8], path: &Path) -> Result<Tensor3> {
    let mut pos = 0usize;
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
            return Err(Error::malformed(path, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::malformed(path, format!("unsupported magic {m:?}"))),
    };
    let mut number =
        |what: &str| -> Result<usize> { token()?.parse().map_err(|_| Error::malformed(path, format!("bad {what}"))) };
    let w = number("width")?;
    let h = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(Error::malformed(path, format!("only 8-bit maxval 255 supported, got {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let need = w * h * channels;
    if bytes.len() < start + need {
        return Err(Error::malformed(path, "raster shorter than header dimensions"));
    }
    let raster = &bytes[start..start + need];
    Tensor3::from_fn(channels, h, w, |c, y, x| raster[(y * w + x) * channels + c] as f64 / 255.0)
}

pub fn write_netpbm(path: impl AsRef<Path>, t: &Tensor3) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_netpbm(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_netpbm(path: impl AsRef<Path>) -> Result<Tensor3> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_netpbm(&bytes, path)
}

/// Reads either format, picking by the leading magic bytes.
pub fn read_any(path: impl AsRef<Path>) -> Result<Tensor3> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_netpbm(&bytes, path)
    } else {
        decode_raw(&bytes, path)
    }
}

/// Writes a single-channel map as PGM after rescaling `[min, max]` to `[0, 1]`.
pub fn write_pgm_normalized(path: impl AsRef<Path>, t: &Tensor3) -> Result<()> {
    let (lo, hi) = (t.min(), t.max());
    let scaled = if hi > lo { t.map(|v| (v - lo) / (hi - lo))? } else { t.map(|_| 0.0)? };
    write_netpbm(path, &scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn raw_header_is_exact() {
        let t = Tensor3::filled(1, 2, 3, 0.5);
        let bytes = encode_raw(&t, DType::F32);
        let header = b"{\"dtype\":\"f32\",\"shape\":[1,2,3]}\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 6 * 4);
        assert_eq!(&bytes[header.len()..header.len() + 4], &0.5f32.to_le_bytes());
    }

    #[test]
    fn malformed_raw() {
        let p = Path::new("x.raw");
        assert!(matches!(decode_raw(b"no newline", p), Err(Error::Malformed { .. })));
        assert!(matches!(
            decode_raw(b"{\"dtype\":\"f32\",\"shape\":[1,1,2]}\n\0\0\0\0", p),
            Err(Error::Malformed { .. })
        ));
        assert!(matches!(decode_raw(b"{\"dtype\":\"i8\",\"shape\":[1,1,1]}\n\0", p), Err(Error::Malformed { .. })));
    }

    #[test]
    fn netpbm_with_comment() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        let t = decode_netpbm(bytes, Path::new("a.pgm")).unwrap();
        assert_eq!(t.shape(), [1, 1, 2]);
        assert_eq!(t.data(), &[0.0, 1.0]);
        assert!(decode_netpbm(b"P5\n2 1\n65535\n\0\0\0\0", Path::new("a.pgm")).is_err());
        assert!(decode_netpbm(b"P5\n2 2\n255\n\0", Path::new("a.pgm")).is_err());
    }

    proptest! {
        #[test]
        fn raw_f64_round_trip(c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
            let t = Tensor3::from_fn(c, h, w, |a, b, d| {
                ((seed ^ (a * 31 + b * 7 + d) as u64) % 1000) as f64 / 7.0 - 50.0
            }).unwrap();
            prop_assert_eq!(decode_raw(&encode_raw(&t, DType::F64), Path::new("t")).unwrap(), t);
        }

        #[test]
        fn netpbm_round_trip(bytes in prop::collection::vec(any::<u8>(), 12)) {
            let t = Tensor3::from_fn(3, 2, 2, |c, y, x| bytes[(y * 2 + x) * 3 + c] as f64 / 255.0).unwrap();
            let enc = encode_netpbm(&t).unwrap();
            let back = decode_netpbm(&enc, Path::new("t.ppm")).unwrap();
            prop_assert_eq!(encode_netpbm(&back).unwrap(), enc);
            prop_assert_eq!(back, t);
        }
    }
}
