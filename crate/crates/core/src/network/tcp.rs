use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use super::{PeerLink, SyncError, SyncResponder};
use crate::wire;

/// Blocking client side of the sync protocol over one TCP connection.
pub struct TcpLink {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpLink {
    pub fn connect(address: &str, timeout: Duration) -> Result<Self, SyncError> {
        let unreachable = |e: io::Error| SyncError::PeerUnreachable(format!("{address}: {e}"));
        let addr = address
            .to_socket_addrs()
            .map_err(unreachable)?
            .next()
            .ok_or_else(|| SyncError::PeerUnreachable(format!("{address}: no address")))?;
        let stream = TcpStream::connect_timeout(&addr, timeout).map_err(unreachable)?;
        stream.set_read_timeout(Some(timeout)).map_err(unreachable)?;
        stream.set_write_timeout(Some(timeout)).map_err(unreachable)?;
        stream.set_nodelay(true).map_err(unreachable)?;
        let reader = BufReader::new(stream.try_clone().map_err(unreachable)?);
        Ok(Self { reader, writer: BufWriter::new(stream) })
    }
}

impl PeerLink for TcpLink {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>, SyncError> {
        let lost = |e: io::Error| SyncError::PeerUnreachable(e.to_string());
        io::Write::write_all(&mut self.writer, request).map_err(lost)?;
        io::Write::flush(&mut self.writer).map_err(lost)?;
        match wire::read_raw(&mut self.reader).map_err(lost)? {
            Some((kind, payload)) => Ok(wire::encode_raw(kind, &payload)),
            None => Err(SyncError::PeerUnreachable("connection closed".into())),
        }
    }
}

/// Serves sync requests on one connection until the peer hangs up.
pub fn serve_connection(stream: TcpStream, responder: &SyncResponder) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    while let Some((kind, payload)) = wire::read_raw(&mut reader)? {
        let reply = responder.respond_bytes(kind, &payload);
        io::Write::write_all(&mut writer, &reply)?;
        io::Write::flush(&mut writer)?;
    }
    Ok(())
}

/// Accept loop on its own thread, one thread per connection.
pub struct SyncServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl SyncServer {
    pub fn bind(address: &str, responder: SyncResponder) -> io::Result<Self> {
        let listener = TcpListener::bind(address)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let thread = std::thread::Builder::new().name("sync-accept".into()).spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                match conn {
                    Ok(stream) => {
                        let responder = responder.clone();
                        std::thread::spawn(move || {
                            if let Err(e) = serve_connection(stream, &responder) {
                                log::debug!("sync connection ended: {e}");
                            }
                        });
                    }
                    Err(e) => log::warn!("sync accept failed: {e}"),
                }
            }
        })?;
        Ok(Self { addr, stop, thread: Some(thread) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(&mut self) {
        if let Some(thread) = self.thread.take() {
            self.stop.store(true, Ordering::SeqCst);
            // Wake the blocking accept.
            let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
            let _ = thread.join();
        }
    }
}

impl Drop for SyncServer {
    fn drop(&mut self) {
        self.stop();
    }
}
