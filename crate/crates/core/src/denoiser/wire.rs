//! `SSDN` denoiser wire protocol (identical framing over TCP and stdio).
//!
//! Every frame starts with `"SSDN" | u32 version | u32 msg_type`, all
//! integers little-endian, followed by a type-specific body:
//!
//! | msg_type | name      | body                                       |
//! |----------|-----------|--------------------------------------------|
//! | 0        | handshake | (empty)                                    |
//! | 1        | request   | `u32 t, u32 C, u32 H, u32 W, C*H*W x f32`  |
//! | 2        | response  | `u32 C, u32 H, u32 W, C*H*W x f32`         |
//! | 255      | error     | `u32 len, len bytes of UTF-8`              |

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::io::{f32s_to_bytes, MAX_ELEMENTS};

pub const MAGIC: &[u8; 4] = b"SSDN";
pub const VERSION: u32 = 1;

pub const MSG_HANDSHAKE: u32 = 0;
pub const MSG_REQUEST: u32 = 1;
pub const MSG_RESPONSE: u32 = 2;
pub const MSG_ERROR: u32 = 255;

/// Cap on error-message bodies.
const MAX_MESSAGE: u32 = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Handshake,
    Request { t: u32, dims: [u32; 3], data: Vec<f32> },
    Response { dims: [u32; 3], data: Vec<f32> },
    Error(String),
}

impl Frame {
    pub fn msg_type(&self) -> u32 {
        match self {
            Frame::Handshake => MSG_HANDSHAKE,
            Frame::Request { .. } => MSG_REQUEST,
            Frame::Response { .. } => MSG_RESPONSE,
            Frame::Error(_) => MSG_ERROR,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.msg_type().to_le_bytes());
        match self {
            Frame::Handshake => {}
            Frame::Request { t, dims, data } => {
                out.extend_from_slice(&t.to_le_bytes());
                for d in dims {
                    out.extend_from_slice(&d.to_le_bytes());
                }
                out.extend_from_slice(&f32s_to_bytes(data));
            }
            Frame::Response { dims, data } => {
                for d in dims {
                    out.extend_from_slice(&d.to_le_bytes());
                }
                out.extend_from_slice(&f32s_to_bytes(data));
            }
            Frame::Error(msg) => {
                out.extend_from_slice(&(msg.len() as u32).to_le_bytes());
                out.extend_from_slice(msg.as_bytes());
            }
        }
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.encode())?;
        w.flush()
    }
}

fn short(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Protocol("short payload".into())
    } else {
        Error::Io(e)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(short)?;
    Ok(u32::from_le_bytes(b))
}

fn read_dims<R: Read>(r: &mut R) -> Result<([u32; 3], usize)> {
    let dims = [read_u32(r)?, read_u32(r)?, read_u32(r)?];
    let n = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(u64::from(d)))
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or_else(|| Error::Protocol("dims overflow".into()))?;
    Ok((dims, n as usize))
}

fn read_payload<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(short)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Reads one frame. Returns `Ok(None)` on a clean end of stream (zero bytes
/// before the magic); an end of stream inside a frame is "short payload".
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>> {
    let mut magic = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut magic[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(Error::Protocol("short payload".into())),
            Ok(k) => filled += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::Io(e)),
        }
    }
    if &magic != MAGIC {
        return Err(Error::Protocol("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Protocol(format!("unsupported protocol version {version}")));
    }
    let frame = match read_u32(r)? {
        MSG_HANDSHAKE => Frame::Handshake,
        MSG_REQUEST => {
            let t = read_u32(r)?;
            let (dims, n) = read_dims(r)?;
            Frame::Request {
                t,
                dims,
                data: read_payload(r, n)?,
            }
        }
        MSG_RESPONSE => {
            let (dims, n) = read_dims(r)?;
            Frame::Response {
                dims,
                data: read_payload(r, n)?,
            }
        }
        MSG_ERROR => {
            let len = read_u32(r)?;
            if len > MAX_MESSAGE {
                return Err(Error::Protocol("error message too long".into()));
            }
            let mut buf = vec![0u8; len as usize];
            r.read_exact(&mut buf).map_err(short)?;
            Frame::Error(String::from_utf8_lossy(&buf).into_owned())
        }
        other => return Err(Error::Protocol(format!("unknown msg_type {other}"))),
    };
    Ok(Some(frame))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_bytes_are_exact() {
        let f = Frame::Request {
            t: 7,
            dims: [1, 1, 2],
            data: vec![0.5, -1.0],
        };
        let mut expected = b"SSDN".to_vec();
        for v in [1u32, 1, 7, 1, 1, 2] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        expected.extend_from_slice(&0.5f32.to_le_bytes());
        expected.extend_from_slice(&(-1.0f32).to_le_bytes());
        assert_eq!(f.encode(), expected);
    }

    #[test]
    fn every_frame_kind_round_trips() {
        for f in [
            Frame::Handshake,
            Frame::Request {
                t: 3,
                dims: [3, 1, 1],
                data: vec![1.0, 2.0, 3.0],
            },
            Frame::Response {
                dims: [1, 2, 1],
                data: vec![f32::MIN_POSITIVE, -0.0],
            },
            Frame::Error("boom".into()),
        ] {
            let bytes = f.encode();
            assert_eq!(read_frame(&mut bytes.as_slice()).unwrap(), Some(f));
        }
    }

    #[test]
    fn clean_eof_and_truncation() {
        assert_eq!(read_frame(&mut [].as_slice()).unwrap(), None);
        let mut bytes = Frame::Response {
            dims: [1, 2, 2],
            data: vec![0.0; 4],
        }
        .encode();
        bytes.truncate(bytes.len() - 1);
        let err = read_frame(&mut bytes.as_slice()).unwrap_err();
        assert!(err.to_string().contains("short payload"));
        let err = read_frame(&mut b"SS".as_slice()).unwrap_err();
        assert!(err.to_string().contains("short payload"));
    }

    #[test]
    fn bad_magic_unknown_type_and_overflow() {
        let mut bytes = Frame::Handshake.encode();
        bytes[0] = b'X';
        assert!(read_frame(&mut bytes.as_slice()).unwrap_err().to_string().contains("bad magic"));

        let mut bytes = b"SSDN".to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&9u32.to_le_bytes());
        assert!(read_frame(&mut bytes.as_slice()).unwrap_err().to_string().contains("msg_type"));

        let mut bytes = b"SSDN".to_vec();
        for v in [1u32, 2, 3, 65536, 65536] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(read_frame(&mut bytes.as_slice()).unwrap_err().to_string().contains("dims overflow"));
    }
}
