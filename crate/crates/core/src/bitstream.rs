//! On-disk container: a fixed little-endian header followed by one record per frame.
//!
//! ```text
//! "STTV" | version u8 | width u16 | height u16 | channels u8 | lambda_id u8
//!        | intra_period u16 | frame_count u32 | config_hash [u8; 32]
//! then frame_count x ( type u8 (0 = I, 1 = P) | payload_len u32 | payload )
//! ```

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"STTV";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 2 + 2 + 1 + 1 + 2 + 4 + 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameKind {
    Intra = 0,
    Inter = 1,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContainerHeader {
    /// Original (pre-padding) frame size.
    pub width: u16,
    pub height: u16,
    pub channels: u8,
    pub lambda_id: u8,
    pub intra_period: u16,
    pub frame_count: u32,
    /// Architecture and rate-weight digest the decoder must match.
    pub config_hash: [u8; 32],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameRecord {
    pub kind: FrameKind,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub header: ContainerHeader,
    pub records: Vec<FrameRecord>,
}

impl Container {
    pub fn byte_len(&self) -> usize {
        HEADER_LEN + self.records.iter().map(|r| 5 + r.payload.len()).sum::<usize>()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend(MAGIC);
        out.push(VERSION);
        out.extend(h.width.to_le_bytes());
        out.extend(h.height.to_le_bytes());
        out.push(h.channels);
        out.push(h.lambda_id);
        out.extend(h.intra_period.to_le_bytes());
        out.extend(h.frame_count.to_le_bytes());
        out.extend(h.config_hash);
        for r in &self.records {
            out.push(r.kind as u8);
            out.extend((r.payload.len() as u32).to_le_bytes());
            out.extend(&r.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated(format!("container header needs {HEADER_LEN} bytes, got {}", bytes.len())));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::InvalidArgument("not an STTV container (bad magic)".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::UnsupportedVersion(bytes[4]));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let header = ContainerHeader {
            width: u16_at(5),
            height: u16_at(7),
            channels: bytes[9],
            lambda_id: bytes[10],
            intra_period: u16_at(11),
            frame_count: u32::from_le_bytes(bytes[13..17].try_into().expect("4 bytes")),
            config_hash: bytes[17..49].try_into().expect("32 bytes"),
        };
        let mut pos = HEADER_LEN;
        let mut records = Vec::with_capacity(header.frame_count as usize);
        for frame in 0..header.frame_count as usize {
            let corrupt = |reason: String| Error::Corrupt { frame, reason };
            if bytes.len() < pos + 5 {
                return Err(corrupt("record header truncated".into()));
            }
            let kind = match bytes[pos] {
                0 => FrameKind::Intra,
                1 => FrameKind::Inter,
                t => return Err(corrupt(format!("unknown record type {t}"))),
            };
            let len = u32::from_le_bytes(bytes[pos + 1..pos + 5].try_into().expect("4 bytes")) as usize;
            pos += 5;
            if bytes.len() < pos + len {
                return Err(corrupt(format!("payload of {len} bytes truncated")));
            }
            records.push(FrameRecord {
                kind,
                payload: bytes[pos..pos + len].to_vec(),
            });
            pos += len;
        }
        if pos != bytes.len() {
            return Err(Error::Corrupt {
                frame: header.frame_count as usize,
                reason: format!("{} bytes after the last record", bytes.len() - pos),
            });
        }
        Ok(Self { header, records })
    }
}
