//! Harvester side of the extractor channel.
//!
//! The harvester is the only listening daemon. An extractor connects, sends
//! a `test` ping carrying `subscribe="extract"`, and the connection is then
//! used in reverse: the harvester sends commands and reads the replies.
//! Every attached connection pulls from one shared request queue, so several
//! channels give concurrent extraction.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use tokio::sync::{mpsc, oneshot, Mutex};

use crate::format::{OpsMessage, OpsRole};
use crate::messaging::{Connection, FrameConfig, MessagingError, Takeover};

pub const SUBSCRIBE_ATTR: &str = "subscribe";
pub const SUBSCRIBE_EXTRACT: &str = "extract";

type Reply = Result<(OpsMessage, Option<Vec<u8>>), MessagingError>;

struct HubRequest {
    msg: OpsMessage,
    reply: oneshot::Sender<Reply>,
}

pub struct ExtractorHub {
    tx: mpsc::Sender<HubRequest>,
    rx: Mutex<mpsc::Receiver<HubRequest>>,
    connected: AtomicUsize,
    reply_timeout: Duration,
}

impl ExtractorHub {
    pub fn new(capacity: usize, reply_timeout: Duration) -> Arc<Self> {
        let (tx, rx) = mpsc::channel(capacity.max(1));
        Arc::new(ExtractorHub {
            tx,
            rx: Mutex::new(rx),
            connected: AtomicUsize::new(0),
            reply_timeout,
        })
    }

    pub fn connected(&self) -> usize {
        self.connected.load(Ordering::SeqCst)
    }

    /// Sends `msg` to whichever extractor channel is free and waits for the
    /// reply (plus the document frame after an acked readback).
    pub async fn request(&self, msg: OpsMessage, wait: Duration) -> Reply {
        if self.connected() == 0 {
            return Err(MessagingError::ConnectionRefused("no extractor attached".into()));
        }
        let (reply, rx) = oneshot::channel();
        self.tx
            .try_send(HubRequest { msg, reply })
            .map_err(|_| MessagingError::ProtocolError("extractor queue full".into()))?;
        match tokio::time::timeout(wait, rx).await {
            Err(_) => Err(MessagingError::Timeout),
            Ok(Err(_)) => Err(MessagingError::Closed),
            Ok(Ok(r)) => r,
        }
    }

    pub fn is_subscription(msg: &OpsMessage) -> bool {
        msg.role == OpsRole::Test && msg.extras.attr(SUBSCRIBE_ATTR) == Some(SUBSCRIBE_EXTRACT)
    }

    /// The closure a server handler returns to take over a subscribing
    /// connection.
    pub fn attach(self: &Arc<Self>) -> Takeover {
        let hub = self.clone();
        Box::new(move |conn| Box::pin(async move { hub.pump(conn).await }))
    }

    async fn pump(self: Arc<Self>, mut conn: Connection) {
        self.connected.fetch_add(1, Ordering::SeqCst);
        let peer = conn.peer();
        tracing::info!(%peer, "extractor attached");
        let cfg = FrameConfig {
            header_timeout: self.reply_timeout,
            body_timeout: self.reply_timeout,
            ..conn.config()
        };
        loop {
            let next = { self.rx.lock().await.recv().await };
            let Some(req) = next else { break };
            if let Err(e) = conn.send(&req.msg).await {
                tracing::info!(%peer, error = %e, "extractor channel lost");
                // hand the request to another channel if one is left
                let _ = self.tx.try_send(req);
                break;
            }
            let result = async {
                let reply = conn.recv(&cfg).await?;
                if req.msg.role == OpsRole::Readback && reply.role == OpsRole::Ack {
                    let doc = conn.recv_raw(&cfg).await?;
                    return Ok((reply, Some(doc)));
                }
                Ok((reply, None))
            }
            .await;
            let broken = result.is_err();
            let _ = req.reply.send(result);
            if broken {
                break;
            }
        }
        self.connected.fetch_sub(1, Ordering::SeqCst);
        tracing::info!(%peer, "extractor detached");
    }
}
