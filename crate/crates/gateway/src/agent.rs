//! The handheld agent link: framed request/response over any byte stream.

use std::io;
use std::sync::Arc;

use infohub_core::engine::{EngineAction, Phase, Role};
use infohub_core::wire::{self, AgentFrame, FrameError, PayloadError};
use serde_json::json;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use crate::events::EventKind;
use crate::hub::Hub;

/// Spoken back after a presenter's explanation is stored.
pub const INGEST_ACK: &str = "Thank you. I will remember that.";

enum Incoming {
    Frame(AgentFrame),
    /// A complete frame that could not be decoded; the stream is still in sync.
    Undecodable(FrameError),
}

async fn read_frame<R: AsyncRead + Unpin>(r: &mut R) -> io::Result<Option<Incoming>> {
    let mut header = [0u8; wire::HEADER_LEN];
    match r.read_exact(&mut header[..1]).await {
        Ok(_) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    r.read_exact(&mut header[1..]).await?;
    let kind = header[0];
    let len = u32::from_le_bytes([header[1], header[2], header[3], header[4]]);
    if len > wire::MAX_PAYLOAD {
        return Err(io::Error::new(io::ErrorKind::InvalidData, FrameError::Oversized { len }));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).await?;
    let frame_len = wire::HEADER_LEN + payload.len();
    Ok(Some(match AgentFrame::decode_payload(kind, &payload) {
        Ok(f) => Incoming::Frame(f),
        Err(PayloadError::UnknownType) => Incoming::Undecodable(FrameError::UnknownType { kind, frame_len }),
        Err(e) => Incoming::Undecodable(FrameError::Malformed { kind, frame_len, reason: e.to_string() }),
    }))
}

async fn send<W: AsyncWrite + Unpin>(w: &mut W, frame: &AgentFrame) -> io::Result<()> {
    w.write_all(&wire::encode_frame(frame)).await?;
    w.flush().await
}

/// Serves one agent connection until it closes.
///
/// The first frame must be HELLO; anything else gets an ERROR and the
/// connection is closed. HELLO is answered with a HELLO whose `resume`
/// carries the session id to reconnect with. Undecodable frames and
/// backend failures get ERROR replies and the session carries on.
pub async fn serve_agent<S>(hub: Arc<Hub>, stream: S) -> io::Result<()>
where
    S: AsyncRead + AsyncWrite + Unpin,
{
    let (mut rd, mut wr) = tokio::io::split(stream);

    let (role, share, resume) = match read_frame(&mut rd).await {
        Ok(Some(Incoming::Frame(AgentFrame::Hello { role, share, resume }))) => (role, share, resume),
        Ok(None) => return Ok(()),
        Ok(Some(_)) => return send(&mut wr, &AgentFrame::error("protocol violation: expected HELLO first")).await,
        Err(e) => {
            let _ = send(&mut wr, &AgentFrame::error(e.to_string())).await;
            return Err(e);
        }
    };
    let session_id = match hub.open_session(resume.as_deref(), role, share) {
        Ok(id) => id,
        Err(e) => return send(&mut wr, &AgentFrame::error(e.to_string())).await,
    };
    hub.events().record(&session_id, EventKind::Utterance, json!({"event": "connect", "role": role, "share": share}));
    send(&mut wr, &AgentFrame::Hello { role, share, resume: Some(session_id.clone()) }).await?;

    // A presenter can switch the connection to answering and back.
    let mut active = session_id.clone();
    loop {
        let frame = match read_frame(&mut rd).await {
            Ok(Some(Incoming::Frame(f))) => f,
            Ok(Some(Incoming::Undecodable(e))) => {
                send(&mut wr, &AgentFrame::error(e.to_string())).await?;
                continue;
            }
            Ok(None) => return Ok(()),
            Err(e) => {
                let _ = send(&mut wr, &AgentFrame::error(e.to_string())).await;
                return Err(e);
            }
        };
        match frame {
            AgentFrame::Ping => send(&mut wr, &AgentFrame::Pong).await?,
            AgentFrame::Transcript { text } => respond(&hub, &active, text, &mut wr).await?,
            AgentFrame::Audio { format_tag, data } => {
                let h = Arc::clone(&hub);
                let transcribed =
                    tokio::task::spawn_blocking(move || h.engine().backends().transcribe(&data, &format_tag))
                        .await
                        .map_err(io::Error::other)?;
                match transcribed {
                    Ok(text) => respond(&hub, &active, text, &mut wr).await?,
                    Err(e) => {
                        hub.events().record(
                            &active,
                            EventKind::Error,
                            json!({"error": e.to_string(), "stage": "transcribe"}),
                        );
                        send(&mut wr, &AgentFrame::error(e.to_string())).await?;
                    }
                }
            }
            AgentFrame::PhaseSet { phase } => {
                if role != Role::Presenter {
                    send(&mut wr, &AgentFrame::error("PHASE_SET is only allowed for presenters")).await?;
                    continue;
                }
                active = match phase {
                    Phase::Input => session_id.clone(),
                    Phase::Explanation => hub.explanation_session(&session_id),
                };
                hub.events().record(
                    &session_id,
                    EventKind::Utterance,
                    json!({"event": "phase_set", "phase": phase, "active": active}),
                );
                send(&mut wr, &AgentFrame::PhaseSet { phase }).await?;
            }
            AgentFrame::Hello { .. } => send(&mut wr, &AgentFrame::error("HELLO already received")).await?,
            other => {
                send(&mut wr, &AgentFrame::error(format!("frame type {} is not accepted from agents", other.kind())))
                    .await?
            }
        }
    }
}

async fn respond<W: AsyncWrite + Unpin>(hub: &Arc<Hub>, session: &str, text: String, wr: &mut W) -> io::Result<()> {
    let h = Arc::clone(hub);
    let id = session.to_string();
    let actions = tokio::task::spawn_blocking(move || h.step(&id, &text)).await.map_err(io::Error::other)?;

    if let Some(EngineAction::Fault(e)) = actions.iter().find(|a| matches!(a, EngineAction::Fault(_))) {
        return send(wr, &AgentFrame::error(e.to_string())).await;
    }
    let reply = actions
        .iter()
        .find_map(|a| match a {
            EngineAction::Answered(answer) => Some(answer.text.clone()),
            EngineAction::IngestedChunks(_) => Some(INGEST_ACK.to_string()),
            _ => None,
        })
        .unwrap_or_default();
    send(wr, &AgentFrame::ReplyText { text: reply.clone() }).await?;

    if hub.config().synthesize_replies && !reply.is_empty() {
        let h = Arc::clone(hub);
        match tokio::task::spawn_blocking(move || h.engine().backends().synthesize(&reply))
            .await
            .map_err(io::Error::other)?
        {
            Ok(audio) => send(wr, &AgentFrame::ReplyAudio { format_tag: audio.format_tag, data: audio.bytes }).await?,
            Err(e) => send(wr, &AgentFrame::error(e.to_string())).await?,
        }
    }
    Ok(())
}
