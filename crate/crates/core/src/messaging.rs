//! Length-prefixed TCP transport for control messages.
//!
//! Every message is a two-part burst: a 4-byte big-endian byte count followed
//! by that many bytes of UTF-8 XML. The harvester binds the server; the
//! monitor and the extractor connect as clients.

use std::fmt;
use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::pin::Pin;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::watch;
use tokio::task::JoinSet;
use tokio::time::timeout;

use crate::format::{decode_ops_message, encode_ops_message, FormatError, OpsMessage, OpsRole};

pub const HEADER_LEN: usize = 4;
pub const DEFAULT_MAX_FRAME_SIZE: u32 = 64 * 1024 * 1024;
pub const DEFAULT_HARVESTER_PORT: u16 = 5801;

/// Initial buffer reservation; the payload buffer grows only as bytes arrive.
const READ_CHUNK: usize = 64 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum MessagingError {
    #[error("empty payload")]
    EmptyPayload,
    #[error("payload of {len} bytes exceeds the {max} byte frame limit")]
    PayloadTooLarge { len: usize, max: u32 },
    #[error("frame truncated: expected {expected} bytes, received {received}")]
    Truncated { expected: usize, received: usize },
    #[error("declared frame length {declared} exceeds the {max} byte limit")]
    Oversized { declared: u32, max: u32 },
    #[error("timed out waiting for a frame header")]
    Timeout,
    #[error("connection closed by peer")]
    Closed,
    #[error("connection refused by {0}")]
    ConnectionRefused(String),
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("failed to bind {addr}: {source}")]
    BindFailure { addr: String, source: io::Error },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, MessagingError>;

#[derive(Debug, Clone, Copy)]
pub struct FrameConfig {
    pub max_frame_size: u32,
    pub header_timeout: Duration,
    pub body_timeout: Duration,
}

impl Default for FrameConfig {
    fn default() -> Self {
        FrameConfig {
            max_frame_size: DEFAULT_MAX_FRAME_SIZE,
            header_timeout: Duration::from_secs(10),
            body_timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndpointRole {
    Server,
    Client,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
    pub role: EndpointRole,
}

impl Endpoint {
    pub fn new(host: impl Into<String>, port: u16, role: EndpointRole) -> Result<Self> {
        if port == 0 {
            return Err(MessagingError::ProtocolError(
                "port must be in 1..=65535".into(),
            ));
        }
        Ok(Endpoint {
            host: host.into(),
            port,
            role,
        })
    }

    /// A server endpoint on an OS-assigned port.
    pub fn ephemeral(host: impl Into<String>) -> Self {
        Endpoint {
            host: host.into(),
            port: 0,
            role: EndpointRole::Server,
        }
    }

    pub fn client(addr: SocketAddr) -> Self {
        Endpoint {
            host: addr.ip().to_string(),
            port: addr.port(),
            role: EndpointRole::Client,
        }
    }

    pub fn address(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

/// Prefixes `payload` with its 4-byte big-endian length.
pub fn frame(payload: &[u8]) -> Result<Vec<u8>> {
    frame_with_limit(payload, DEFAULT_MAX_FRAME_SIZE)
}

pub fn frame_with_limit(payload: &[u8], max: u32) -> Result<Vec<u8>> {
    if payload.is_empty() {
        return Err(MessagingError::EmptyPayload);
    }
    if payload.len() > max as usize {
        return Err(MessagingError::PayloadTooLarge {
            len: payload.len(),
            max,
        });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

pub async fn write_frame<W: AsyncWrite + Unpin>(w: &mut W, payload: &[u8], cfg: &FrameConfig) -> Result<()> {
    let bytes = frame_with_limit(payload, cfg.max_frame_size)?;
    w.write_all(&bytes).await?;
    w.flush().await?;
    Ok(())
}

/// Reads one frame and returns exactly its payload.
///
/// A clean end of stream before any header byte is [`MessagingError::Closed`];
/// anything that ends mid-frame is [`MessagingError::Truncated`].
pub async fn read_frame<R: AsyncRead + Unpin>(r: &mut R, cfg: &FrameConfig) -> Result<Vec<u8>> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    let header_read = async {
        while got < HEADER_LEN {
            let n = r.read(&mut header[got..]).await?;
            if n == 0 {
                return Err(if got == 0 {
                    MessagingError::Closed
                } else {
                    MessagingError::Truncated {
                        expected: HEADER_LEN,
                        received: got,
                    }
                });
            }
            got += n;
        }
        Ok(())
    };
    match timeout(cfg.header_timeout, header_read).await {
        Ok(res) => res?,
        Err(_) if got == 0 => return Err(MessagingError::Timeout),
        Err(_) => {
            return Err(MessagingError::Truncated {
                expected: HEADER_LEN,
                received: got,
            })
        }
    }

    let declared = u32::from_be_bytes(header);
    if declared == 0 {
        return Err(MessagingError::EmptyPayload);
    }
    if declared > cfg.max_frame_size {
        return Err(MessagingError::Oversized {
            declared,
            max: cfg.max_frame_size,
        });
    }

    let expected = declared as usize;
    let mut payload = Vec::with_capacity(expected.min(READ_CHUNK));
    // grow geometrically but never past the declared length, so a frame
    // never costs more than max_frame_size
    let body_read = async {
        while payload.len() < expected {
            let want = (expected - payload.len()).min(READ_CHUNK);
            if payload.capacity() - payload.len() < want {
                let target = (payload.capacity() * 2).max(payload.len() + want).min(expected);
                payload.reserve_exact(target - payload.len());
            }
            let n = (&mut *r).take(want as u64).read_buf(&mut payload).await?;
            if n == 0 {
                break;
            }
        }
        Ok::<_, io::Error>(())
    };
    match timeout(cfg.body_timeout, body_read).await {
        Ok(Ok(_)) => {}
        Ok(Err(e)) if e.kind() == io::ErrorKind::UnexpectedEof => {}
        Ok(Err(e)) => return Err(e.into()),
        Err(_) => {}
    }
    if payload.len() != expected {
        return Err(MessagingError::Truncated {
            expected,
            received: payload.len(),
        });
    }
    Ok(payload)
}

async fn connect(endpoint: &Endpoint, wait: Duration) -> Result<TcpStream> {
    match timeout(wait, TcpStream::connect(endpoint.address())).await {
        Err(_) => Err(MessagingError::Timeout),
        Ok(Err(e)) if e.kind() == io::ErrorKind::ConnectionRefused => {
            Err(MessagingError::ConnectionRefused(endpoint.to_string()))
        }
        Ok(Err(e)) => Err(e.into()),
        Ok(Ok(s)) => {
            s.set_nodelay(true)?;
            Ok(s)
        }
    }
}

fn check_reply(reply: OpsMessage) -> Result<OpsMessage> {
    if reply.role.is_reply() {
        Ok(reply)
    } else {
        Err(MessagingError::ProtocolError(format!(
            "reply has role={}, expected ack or error",
            reply.role
        )))
    }
}

/// Sends `msg` over a fresh connection and returns the validated reply.
pub async fn request(endpoint: &Endpoint, msg: &OpsMessage, wait: Duration) -> Result<OpsMessage> {
    let mut client = Client::new(
        endpoint.clone(),
        FrameConfig {
            header_timeout: wait,
            ..FrameConfig::default()
        },
    );
    client.request(msg).await
}

/// A client connection reused serially across requests.
pub struct Client {
    endpoint: Endpoint,
    cfg: FrameConfig,
    conn: Option<TcpStream>,
}

impl Client {
    pub fn new(endpoint: Endpoint, cfg: FrameConfig) -> Self {
        Client {
            endpoint,
            cfg,
            conn: None,
        }
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    async fn stream(&mut self) -> Result<&mut TcpStream> {
        if self.conn.is_none() {
            self.conn = Some(connect(&self.endpoint, self.cfg.header_timeout).await?);
        }
        Ok(self.conn.as_mut().expect("just connected"))
    }

    async fn exchange(&mut self, payload: &[u8]) -> Result<OpsMessage> {
        let cfg = self.cfg;
        let stream = self.stream().await?;
        write_frame(stream, payload, &cfg).await?;
        let bytes = read_frame(stream, &cfg).await?;
        check_reply(decode_ops_message(&bytes)?)
    }

    pub async fn request(&mut self, msg: &OpsMessage) -> Result<OpsMessage> {
        let payload = encode_ops_message(msg)?;
        let reused = self.conn.is_some();
        match self.exchange(&payload).await {
            Ok(reply) => Ok(reply),
            // a pooled connection may have been closed by the server while idle
            Err(MessagingError::Closed | MessagingError::Io(_)) if reused => {
                self.conn = None;
                self.exchange(&payload).await.inspect_err(|_| self.conn = None)
            }
            Err(e) => {
                self.conn = None;
                Err(e)
            }
        }
    }

    /// Sends a readback request; on ack the reply is followed by one frame
    /// carrying the encoded document.
    pub async fn readback(&mut self, msg: &OpsMessage) -> Result<(OpsMessage, Option<Vec<u8>>)> {
        let reply = self.request(msg).await?;
        if reply.role != OpsRole::Ack {
            return Ok((reply, None));
        }
        let cfg = self.cfg;
        let stream = self.stream().await?;
        match read_frame(stream, &cfg).await {
            Ok(doc) => Ok((reply, Some(doc))),
            Err(e) => {
                self.conn = None;
                Err(e)
            }
        }
    }
}

/// A server-side connection after the first message, for handlers that take
/// over the socket (e.g. a long-lived notification channel).
pub struct Connection {
    stream: TcpStream,
    cfg: FrameConfig,
    peer: SocketAddr,
}

impl Connection {
    pub fn peer(&self) -> SocketAddr {
        self.peer
    }

    pub fn config(&self) -> FrameConfig {
        self.cfg
    }

    pub async fn send(&mut self, msg: &OpsMessage) -> Result<()> {
        let payload = encode_ops_message(msg)?;
        write_frame(&mut self.stream, &payload, &self.cfg).await
    }

    pub async fn send_raw(&mut self, payload: &[u8]) -> Result<()> {
        write_frame(&mut self.stream, payload, &self.cfg).await
    }

    pub async fn recv_raw(&mut self, cfg: &FrameConfig) -> Result<Vec<u8>> {
        read_frame(&mut self.stream, cfg).await
    }

    pub async fn recv(&mut self, cfg: &FrameConfig) -> Result<OpsMessage> {
        let bytes = read_frame(&mut self.stream, cfg).await?;
        Ok(decode_ops_message(&bytes)?)
    }
}

pub type Takeover = Box<dyn FnOnce(Connection) -> Pin<Box<dyn Future<Output = ()> + Send>> + Send>;

pub enum Response {
    Reply(OpsMessage),
    /// Reply followed by a second frame carrying a raw document.
    WithDocument(OpsMessage, Vec<u8>),
    /// Reply, then hand the socket to the closure.
    Takeover(OpsMessage, Takeover),
}

#[async_trait]
pub trait Handler: Send + Sync + 'static {
    async fn handle(&self, msg: OpsMessage, peer: SocketAddr) -> Response;
}

/// Adapts a plain `OpsMessage -> OpsMessage` function. `test` pings are
/// acknowledged without calling it.
pub struct FnHandler<F>(pub F);

#[async_trait]
impl<F> Handler for FnHandler<F>
where
    F: Fn(OpsMessage) -> OpsMessage + Send + Sync + 'static,
{
    async fn handle(&self, msg: OpsMessage, _peer: SocketAddr) -> Response {
        if msg.role == OpsRole::Test {
            return Response::Reply(OpsMessage::ack("OK", "alive"));
        }
        Response::Reply((self.0)(msg))
    }
}

pub struct ServerHandle {
    local_addr: SocketAddr,
    shutdown: watch::Sender<bool>,
    task: Option<tokio::task::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn endpoint(&self) -> Endpoint {
        Endpoint::client(self.local_addr)
    }

    /// Stops accepting and drops every open connection.
    pub async fn shutdown(mut self) {
        let _ = self.shutdown.send(true);
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.shutdown.send(true);
        if let Some(task) = self.task.take() {
            task.abort();
        }
    }
}

/// Binds `endpoint` and serves each connection on its own task: read a
/// frame, validate it, call the handler, write the reply. Invalid messages
/// get a `role=error` reply with code `E_SCHEMA` and the connection stays open.
pub async fn serve(endpoint: &Endpoint, handler: Arc<dyn Handler>, cfg: FrameConfig) -> Result<ServerHandle> {
    let listener = TcpListener::bind(endpoint.address())
        .await
        .map_err(|source| MessagingError::BindFailure {
            addr: endpoint.address(),
            source,
        })?;
    let local_addr = listener.local_addr()?;
    let (tx, mut rx) = watch::channel(false);

    let task = tokio::spawn(async move {
        let mut conns = JoinSet::new();
        loop {
            tokio::select! {
                _ = rx.changed() => break,
                accepted = listener.accept() => match accepted {
                    Ok((stream, peer)) => {
                        let _ = stream.set_nodelay(true);
                        conns.spawn(serve_connection(stream, peer, handler.clone(), cfg));
                    }
                    Err(e) => tracing::warn!(error = %e, "accept failed"),
                },
                Some(_) = conns.join_next(), if !conns.is_empty() => {}
            }
        }
        conns.shutdown().await;
    });

    Ok(ServerHandle {
        local_addr,
        shutdown: tx,
        task: Some(task),
    })
}

async fn serve_connection(mut stream: TcpStream, peer: SocketAddr, handler: Arc<dyn Handler>, cfg: FrameConfig) {
    loop {
        let bytes = match read_frame(&mut stream, &cfg).await {
            Ok(b) => b,
            Err(MessagingError::Closed | MessagingError::Timeout) => return,
            Err(e) => {
                tracing::debug!(%peer, error = %e, "dropping connection");
                return;
            }
        };
        let msg = match decode_ops_message(&bytes) {
            Ok(m) => m,
            Err(e) => {
                let reply = OpsMessage::error("E_SCHEMA", e.to_string());
                if send(&mut stream, &reply, &cfg).await.is_err() {
                    return;
                }
                continue;
            }
        };
        match handler.handle(msg, peer).await {
            Response::Reply(reply) => {
                if send(&mut stream, &reply, &cfg).await.is_err() {
                    return;
                }
            }
            Response::WithDocument(reply, doc) => {
                if send(&mut stream, &reply, &cfg).await.is_err()
                    || write_frame(&mut stream, &doc, &cfg).await.is_err()
                {
                    return;
                }
            }
            Response::Takeover(reply, takeover) => {
                if send(&mut stream, &reply, &cfg).await.is_err() {
                    return;
                }
                takeover(Connection { stream, cfg, peer }).await;
                return;
            }
        }
    }
}

async fn send(stream: &mut TcpStream, msg: &OpsMessage, cfg: &FrameConfig) -> Result<()> {
    let payload = encode_ops_message(msg)?;
    write_frame(stream, &payload, cfg).await
}
