//! Length-prefixed binary framing.
//!
//! Every frame is `u8 type | u32 payload length (LE) | payload`. The
//! handheld agent ↔ host link and the hub ↔ hub sync link both use this
//! layout with their own type tables.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::binary::{ReadError, Reader, Writer};
use crate::engine::{Phase, Role};

pub const HEADER_LEN: usize = 5;
/// Frames claiming larger payloads are rejected before buffering.
pub const MAX_PAYLOAD: u32 = 16 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("unknown frame type {kind}")]
    UnknownType { kind: u8, frame_len: usize },
    #[error("truncated frame: need {needed} more bytes")]
    Truncated { needed: usize },
    #[error("frame payload of {len} bytes exceeds limit")]
    Oversized { len: u32 },
    #[error("malformed payload for frame type {kind}: {reason}")]
    Malformed { kind: u8, frame_len: usize, reason: String },
}

impl FrameError {
    /// Bytes to discard to resynchronize on the next frame, when the
    /// offending frame was complete.
    pub fn skip_len(&self) -> Option<usize> {
        match self {
            FrameError::UnknownType { frame_len, .. } | FrameError::Malformed { frame_len, .. } => Some(*frame_len),
            _ => None,
        }
    }
}

/// Splits one frame off the front of `buf`: `(type, payload, consumed)`.
pub fn split_frame(buf: &[u8]) -> Result<(u8, &[u8], usize), FrameError> {
    if buf.len() < HEADER_LEN {
        return Err(FrameError::Truncated { needed: HEADER_LEN - buf.len() });
    }
    let kind = buf[0];
    let len = u32::from_le_bytes([buf[1], buf[2], buf[3], buf[4]]);
    if len > MAX_PAYLOAD {
        return Err(FrameError::Oversized { len });
    }
    let total = HEADER_LEN + len as usize;
    if buf.len() < total {
        return Err(FrameError::Truncated { needed: total - buf.len() });
    }
    Ok((kind, &buf[HEADER_LEN..total], total))
}

pub fn encode_raw(kind: u8, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.push(kind);
    out.extend_from_slice(&crate::binary::len_u32(payload.len()).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

/// Reads one whole frame from a blocking stream. `Ok(None)` on clean EOF
/// before the header.
pub fn read_raw<R: Read>(r: &mut R) -> io::Result<Option<(u8, Vec<u8>)>> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(io::ErrorKind::UnexpectedEof.into()),
            n => got += n,
        }
    }
    let len = u32::from_le_bytes([header[1], header[2], header[3], header[4]]);
    if len > MAX_PAYLOAD {
        return Err(io::Error::new(io::ErrorKind::InvalidData, FrameError::Oversized { len }));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Ok(Some((header[0], payload)))
}

pub fn write_raw<W: Write>(w: &mut W, kind: u8, payload: &[u8]) -> io::Result<()> {
    w.write_all(&encode_raw(kind, payload))?;
    w.flush()
}

pub mod agent_type {
    pub const HELLO: u8 = 1;
    pub const AUDIO: u8 = 2;
    pub const TRANSCRIPT: u8 = 3;
    pub const REPLY_TEXT: u8 = 4;
    pub const REPLY_AUDIO: u8 = 5;
    pub const PHASE_SET: u8 = 6;
    pub const PING: u8 = 7;
    pub const PONG: u8 = 8;
    pub const ERROR: u8 = 9;
}

/// Frames exchanged between the handheld agent and the host.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AgentFrame {
    /// First frame on every connection.
    Hello {
        role: Role,
        share: bool,
        resume: Option<String>,
    },
    Audio {
        format_tag: String,
        data: Vec<u8>,
    },
    /// Already-transcribed speech; skips speech-to-text.
    Transcript {
        text: String,
    },
    ReplyText {
        text: String,
    },
    ReplyAudio {
        format_tag: String,
        data: Vec<u8>,
    },
    PhaseSet {
        phase: Phase,
    },
    Ping,
    Pong,
    Error {
        message: String,
    },
}

fn role_byte(role: Role) -> u8 {
    match role {
        Role::Presenter => 1,
        Role::Visitor => 2,
    }
}

fn phase_byte(phase: Phase) -> u8 {
    match phase {
        Phase::Input => 1,
        Phase::Explanation => 2,
    }
}

impl AgentFrame {
    pub fn kind(&self) -> u8 {
        use agent_type::*;
        match self {
            AgentFrame::Hello { .. } => HELLO,
            AgentFrame::Audio { .. } => AUDIO,
            AgentFrame::Transcript { .. } => TRANSCRIPT,
            AgentFrame::ReplyText { .. } => REPLY_TEXT,
            AgentFrame::ReplyAudio { .. } => REPLY_AUDIO,
            AgentFrame::PhaseSet { .. } => PHASE_SET,
            AgentFrame::Ping => PING,
            AgentFrame::Pong => PONG,
            AgentFrame::Error { .. } => ERROR,
        }
    }

    pub fn error(message: impl Into<String>) -> Self {
        AgentFrame::Error { message: message.into() }
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            AgentFrame::Hello { role, share, resume } => {
                w.u8(role_byte(*role)).u8(u8::from(*share));
                match resume {
                    Some(id) => w.u8(1).str(id),
                    None => w.u8(0),
                };
            }
            AgentFrame::Audio { format_tag, data } | AgentFrame::ReplyAudio { format_tag, data } => {
                w.str(format_tag).bytes(data);
            }
            AgentFrame::Transcript { text } | AgentFrame::ReplyText { text } => {
                w.str(text);
            }
            AgentFrame::Error { message } => {
                w.str(message);
            }
            AgentFrame::PhaseSet { phase } => {
                w.u8(phase_byte(*phase));
            }
            AgentFrame::Ping | AgentFrame::Pong => {}
        }
        w.into_vec()
    }

    pub fn decode_payload(kind: u8, payload: &[u8]) -> Result<Self, PayloadError> {
        use agent_type::*;
        let mut r = Reader::new(payload);
        let frame = match kind {
            HELLO => {
                let role = match r.u8()? {
                    1 => Role::Presenter,
                    2 => Role::Visitor,
                    _ => return Err(PayloadError::Invalid("role")),
                };
                let share = r.bool()?;
                let resume = if r.bool()? { Some(r.string()?) } else { None };
                AgentFrame::Hello { role, share, resume }
            }
            AUDIO => AgentFrame::Audio { format_tag: r.string()?, data: r.bytes()?.to_vec() },
            TRANSCRIPT => AgentFrame::Transcript { text: r.string()? },
            REPLY_TEXT => AgentFrame::ReplyText { text: r.string()? },
            REPLY_AUDIO => AgentFrame::ReplyAudio { format_tag: r.string()?, data: r.bytes()?.to_vec() },
            PHASE_SET => AgentFrame::PhaseSet {
                phase: match r.u8()? {
                    1 => Phase::Input,
                    2 => Phase::Explanation,
                    _ => return Err(PayloadError::Invalid("phase")),
                },
            },
            PING => AgentFrame::Ping,
            PONG => AgentFrame::Pong,
            ERROR => AgentFrame::Error { message: r.string()? },
            _ => return Err(PayloadError::UnknownType),
        };
        r.finish()?;
        Ok(frame)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PayloadError {
    #[error("unknown type")]
    UnknownType,
    #[error(transparent)]
    Read(#[from] ReadError),
    #[error("invalid {0}")]
    Invalid(&'static str),
}

/// Encodes a frame with its header.
pub fn encode_frame(frame: &AgentFrame) -> Vec<u8> {
    encode_raw(frame.kind(), &frame.encode_payload())
}

/// Decodes the first frame in `buf`, returning it with the number of bytes
/// consumed. Never panics; a complete but undecodable frame reports how
/// many bytes to skip.
///
/// ```
/// use infohub_core::wire::{decode_frame, encode_frame, AgentFrame};
/// let bytes = encode_frame(&AgentFrame::Ping);
/// assert_eq!(bytes, [7, 0, 0, 0, 0]);
/// assert_eq!(decode_frame(&bytes).unwrap(), (AgentFrame::Ping, 5));
/// ```
pub fn decode_frame(buf: &[u8]) -> Result<(AgentFrame, usize), FrameError> {
    let (kind, payload, consumed) = split_frame(buf)?;
    match AgentFrame::decode_payload(kind, payload) {
        Ok(frame) => Ok((frame, consumed)),
        Err(PayloadError::UnknownType) => Err(FrameError::UnknownType { kind, frame_len: consumed }),
        Err(e) => Err(FrameError::Malformed { kind, frame_len: consumed, reason: e.to_string() }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_frame() -> impl Strategy<Value = AgentFrame> {
        let role = prop_oneof![Just(Role::Presenter), Just(Role::Visitor)];
        let phase = prop_oneof![Just(Phase::Input), Just(Phase::Explanation)];
        prop_oneof![
            (role, any::<bool>(), proptest::option::of("\\PC{0,12}"))
                .prop_map(|(role, share, resume)| AgentFrame::Hello { role, share, resume }),
            ("[a-z/]{0,12}", proptest::collection::vec(any::<u8>(), 0..64))
                .prop_map(|(format_tag, data)| AgentFrame::Audio { format_tag, data }),
            "\\PC{0,40}".prop_map(|text| AgentFrame::Transcript { text }),
            "\\PC{0,40}".prop_map(|text| AgentFrame::ReplyText { text }),
            ("[a-z/]{0,12}", proptest::collection::vec(any::<u8>(), 0..64))
                .prop_map(|(format_tag, data)| AgentFrame::ReplyAudio { format_tag, data }),
            phase.prop_map(|phase| AgentFrame::PhaseSet { phase }),
            Just(AgentFrame::Ping),
            Just(AgentFrame::Pong),
            "\\PC{0,40}".prop_map(|message| AgentFrame::Error { message }),
        ]
    }

    #[test]
    fn ping_round_trip() {
        let bytes = encode_frame(&AgentFrame::Ping);
        assert_eq!(decode_frame(&bytes).unwrap(), (AgentFrame::Ping, HEADER_LEN));
    }

    #[test]
    fn unknown_type_is_skippable() {
        let mut bytes = encode_raw(250, b"abc");
        bytes.extend(encode_frame(&AgentFrame::Pong));
        let err = decode_frame(&bytes).unwrap_err();
        assert_eq!(err, FrameError::UnknownType { kind: 250, frame_len: 8 });
        let (next, _) = decode_frame(&bytes[err.skip_len().unwrap()..]).unwrap();
        assert_eq!(next, AgentFrame::Pong);
    }

    #[test]
    fn short_input_is_truncated() {
        assert_eq!(decode_frame(&[]), Err(FrameError::Truncated { needed: 5 }));
        assert_eq!(decode_frame(&[3, 10, 0, 0, 0, b'x']), Err(FrameError::Truncated { needed: 9 }));
    }

    #[test]
    fn oversized_and_malformed() {
        assert_eq!(decode_frame(&[3, 0xff, 0xff, 0xff, 0xff]), Err(FrameError::Oversized { len: u32::MAX }));
        // PING with a payload is not canonical
        assert!(matches!(decode_frame(&[7, 1, 0, 0, 0, 0]), Err(FrameError::Malformed { kind: 7, .. })));
        // HELLO with an unknown role
        assert!(matches!(decode_frame(&encode_raw(1, &[9, 0, 0])), Err(FrameError::Malformed { .. })));
    }

    #[test]
    fn blocking_reader_round_trip() {
        let frame = AgentFrame::Transcript { text: "hey".into() };
        let mut cursor = io::Cursor::new(encode_frame(&frame));
        let (kind, payload) = read_raw(&mut cursor).unwrap().unwrap();
        assert_eq!(AgentFrame::decode_payload(kind, &payload).unwrap(), frame);
        assert!(read_raw(&mut cursor).unwrap().is_none());
    }

    proptest! {
        #[test]
        fn frames_round_trip_byte_identically(frame in arb_frame()) {
            let bytes = encode_frame(&frame);
            let (decoded, used) = decode_frame(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(encode_frame(&decoded), bytes);
            prop_assert_eq!(decoded, frame);
        }

        #[test]
        fn decode_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_frame(&bytes);
        }
    }
}
