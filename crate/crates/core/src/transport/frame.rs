//! Wire format for inter-process delivery.
//!
//! ```text
//! [len:u32le][topic:u16le][seq:u64le][ts:u64le][payload; len bytes]
//! ```
//!
//! Fields are little-endian, in this order, with no padding. Topic id
//! [`CONTROL_TOPIC`] is reserved for the connection handshake.

use std::io::{self, Read};

use thiserror::Error;

pub const HEADER_LEN: usize = 4 + 2 + 8 + 8;

/// Reserved topic id carrying the subscriber's hello on a new connection.
pub const CONTROL_TOPIC: u16 = u16::MAX;

/// Upper bound accepted from the wire; protects readers from bogus lengths.
pub const MAX_PAYLOAD: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageFrame {
    pub topic: u16,
    pub seq: u64,
    pub publish_timestamp_ns: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("payload of {0} bytes exceeds the frame limit")]
    TooLarge(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl MessageFrame {
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }
}

pub fn encode_frame(frame: &MessageFrame) -> Result<Vec<u8>, FrameError> {
    let mut out = Vec::with_capacity(frame.encoded_len());
    encode_frame_into(
        frame.topic,
        frame.seq,
        frame.publish_timestamp_ns,
        &frame.payload,
        &mut out,
    )?;
    Ok(out)
}

pub(crate) fn encode_frame_into(
    topic: u16,
    seq: u64,
    ts: u64,
    payload: &[u8],
    out: &mut Vec<u8>,
) -> Result<(), FrameError> {
    let len: u32 = payload
        .len()
        .try_into()
        .map_err(|_| FrameError::TooLarge(payload.len()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&topic.to_le_bytes());
    out.extend_from_slice(&seq.to_le_bytes());
    out.extend_from_slice(&ts.to_le_bytes());
    out.extend_from_slice(payload);
    Ok(())
}

struct Header {
    len: usize,
    topic: u16,
    seq: u64,
    ts: u64,
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Header {
    Header {
        len: u32::from_le_bytes(h[0..4].try_into().unwrap()) as usize,
        topic: u16::from_le_bytes(h[4..6].try_into().unwrap()),
        seq: u64::from_le_bytes(h[6..14].try_into().unwrap()),
        ts: u64::from_le_bytes(h[14..22].try_into().unwrap()),
    }
}

/// Decodes exactly one frame; `bytes` must hold nothing else.
pub fn decode_frame(bytes: &[u8]) -> Result<MessageFrame, FrameError> {
    if bytes.len() < HEADER_LEN {
        return Err(FrameError::Malformed(format!(
            "{} bytes is shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    let h = parse_header(bytes[..HEADER_LEN].try_into().unwrap());
    let body = &bytes[HEADER_LEN..];
    if body.len() != h.len {
        return Err(FrameError::Malformed(format!(
            "length field says {} payload bytes, found {}",
            h.len,
            body.len()
        )));
    }
    Ok(MessageFrame {
        topic: h.topic,
        seq: h.seq,
        publish_timestamp_ns: h.ts,
        payload: body.to_vec(),
    })
}

/// Reads one frame from a stream. Returns `Ok(None)` on a clean end of
/// stream at a frame boundary.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<MessageFrame>, FrameError> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => {
                return Err(FrameError::Malformed(format!(
                    "stream ended after {filled} header bytes"
                )))
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let h = parse_header(&header);
    if h.len > MAX_PAYLOAD {
        return Err(FrameError::TooLarge(h.len));
    }
    let mut payload = vec![0u8; h.len];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FrameError::Malformed("stream ended inside payload".into()),
        _ => FrameError::Io(e),
    })?;
    Ok(Some(MessageFrame {
        topic: h.topic,
        seq: h.seq,
        publish_timestamp_ns: h.ts,
        payload,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_frame_is_22_zero_bytes() {
        let f = MessageFrame {
            topic: 0,
            seq: 0,
            publish_timestamp_ns: 0,
            payload: vec![],
        };
        let bytes = encode_frame(&f).unwrap();
        assert_eq!(bytes, vec![0u8; 22]);
        assert_eq!(decode_frame(&bytes).unwrap(), f);
    }

    #[test]
    fn layout_is_little_endian_in_declared_order() {
        let f = MessageFrame {
            topic: 0x0102,
            seq: 0x0304,
            publish_timestamp_ns: 0x0506,
            payload: vec![0xAA, 0xBB],
        };
        let b = encode_frame(&f).unwrap();
        assert_eq!(&b[0..4], &[2, 0, 0, 0]);
        assert_eq!(&b[4..6], &[0x02, 0x01]);
        assert_eq!(&b[6..14], &[0x04, 0x03, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[14..22], &[0x06, 0x05, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[22..], &[0xAA, 0xBB]);
    }

    #[test]
    fn truncated_header_is_malformed() {
        assert!(matches!(
            decode_frame(&[0u8; 10]),
            Err(FrameError::Malformed(_))
        ));
        let mut r: &[u8] = &[0u8; 10];
        assert!(matches!(read_frame(&mut r), Err(FrameError::Malformed(_))));
    }

    #[test]
    fn length_mismatch_is_malformed() {
        let mut b = encode_frame(&MessageFrame {
            topic: 1,
            seq: 1,
            publish_timestamp_ns: 1,
            payload: vec![1, 2, 3],
        })
        .unwrap();
        b.pop();
        assert!(matches!(decode_frame(&b), Err(FrameError::Malformed(_))));
        b.extend_from_slice(&[3, 4]);
        assert!(matches!(decode_frame(&b), Err(FrameError::Malformed(_))));
    }

    #[test]
    fn stream_reader_handles_back_to_back_frames_and_eof() {
        let frames: Vec<_> = (0..3)
            .map(|i| MessageFrame {
                topic: i,
                seq: i as u64,
                publish_timestamp_ns: 7,
                payload: vec![i as u8; i as usize],
            })
            .collect();
        let mut buf = Vec::new();
        for f in &frames {
            buf.extend(encode_frame(f).unwrap());
        }
        let mut r: &[u8] = &buf;
        for f in &frames {
            assert_eq!(read_frame(&mut r).unwrap().as_ref(), Some(f));
        }
        assert!(read_frame(&mut r).unwrap().is_none());
    }

    proptest! {
        #[test]
        fn round_trip(topic: u16, seq: u64, ts: u64, payload in proptest::collection::vec(any::<u8>(), 0..256)) {
            let f = MessageFrame { topic, seq, publish_timestamp_ns: ts, payload };
            let bytes = encode_frame(&f).unwrap();
            prop_assert_eq!(bytes.len(), HEADER_LEN + f.payload.len());
            prop_assert_eq!(decode_frame(&bytes).unwrap(), f.clone());
            let mut r: &[u8] = &bytes;
            prop_assert_eq!(read_frame(&mut r).unwrap(), Some(f));
        }
    }
}
