//! Runs the HTTP API, the agent listener, the sync listener and gossip
//! side by side.

use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use infohub_core::network::{GossipHandle, SyncObserver, SyncResponder, SyncServer, TcpConnector};
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinSet;

use crate::agent::serve_agent;
use crate::api::router;
use crate::hub::{Hub, HubError};

pub struct RunningHub {
    pub http_addr: SocketAddr,
    pub agent_addr: SocketAddr,
    pub sync_addr: SocketAddr,
    hub: Arc<Hub>,
    stop: watch::Sender<bool>,
    tasks: JoinSet<()>,
    sync_server: SyncServer,
    gossip: GossipHandle,
}

async fn wait_stop(mut rx: watch::Receiver<bool>) {
    let _ = rx.wait_for(|stop| *stop).await;
}

/// Binds every listener and starts serving. Addresses ending in `:0` get
/// an ephemeral port; the bound addresses are on the returned handle.
pub async fn start(hub: Arc<Hub>) -> io::Result<RunningHub> {
    let config = hub.config().clone();
    let (stop, stop_rx) = watch::channel(false);
    let mut tasks = JoinSet::new();

    let http = TcpListener::bind(&config.http_bind).await?;
    let http_addr = http.local_addr()?;
    let app = router(Arc::clone(&hub));
    let rx = stop_rx.clone();
    tasks.spawn(async move {
        if let Err(e) = axum::serve(http, app).with_graceful_shutdown(wait_stop(rx)).await {
            log::error!("http server failed: {e}");
        }
    });

    let agents = TcpListener::bind(&config.agent_bind).await?;
    let agent_addr = agents.local_addr()?;
    let h = Arc::clone(&hub);
    let mut rx = stop_rx.clone();
    tasks.spawn(async move {
        let mut conns = JoinSet::new();
        loop {
            tokio::select! {
                _ = rx.wait_for(|s| *s) => break,
                accepted = agents.accept() => match accepted {
                    Ok((stream, peer)) => {
                        let h = Arc::clone(&h);
                        conns.spawn(async move {
                            if let Err(e) = serve_agent(h, stream).await {
                                log::info!("agent {peer} disconnected: {e}");
                            }
                        });
                    }
                    Err(e) => log::warn!("agent accept failed: {e}"),
                },
            }
        }
        conns.shutdown().await;
    });

    let sync_server = SyncServer::bind(&config.sync_bind, SyncResponder::new(Arc::clone(hub.store())))?;
    let sync_addr = sync_server.local_addr();

    let h = Arc::clone(&hub);
    let observer: SyncObserver = Box::new(move |peer, result| h.record_sync(peer, result));
    let gossip = GossipHandle::spawn(
        Arc::clone(hub.store()),
        hub.peer_list().clone(),
        Duration::from_secs(config.gossip_period_secs),
        Arc::new(TcpConnector { timeout: Duration::from_millis(config.sync_timeout_ms) }),
        Some(observer),
    );

    log::info!("hub {} serving http on {http_addr}, agents on {agent_addr}, sync on {sync_addr}", hub.store().hub_id());
    Ok(RunningHub { http_addr, agent_addr, sync_addr, hub, stop, tasks, sync_server, gossip })
}

impl RunningHub {
    pub fn hub(&self) -> &Arc<Hub> {
        &self.hub
    }

    /// Stops accepting, waits for in-flight work, then snapshots the store.
    pub async fn shutdown(mut self) -> Result<(), HubError> {
        let _ = self.stop.send(true);
        while self.tasks.join_next().await.is_some() {}
        let RunningHub { hub, mut sync_server, mut gossip, .. } = self;
        tokio::task::spawn_blocking(move || {
            gossip.stop();
            sync_server.stop();
            hub.shutdown()
        })
        .await
        .map_err(|e| HubError::Io(io::Error::other(e)))?
    }
}

/// Serves until Ctrl-C.
pub async fn serve(hub: Arc<Hub>) -> Result<(), HubError> {
    let running = start(hub).await?;
    eprintln!(
        "serving: http {} | agents {} | sync {} (Ctrl-C to stop)",
        running.http_addr, running.agent_addr, running.sync_addr
    );
    tokio::signal::ctrl_c().await?;
    running.shutdown().await
}
