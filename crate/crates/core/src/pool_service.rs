//! The shared head pool: an in-memory versioned store, a TCP service in
//! front of it, and a directory-backed variant for single-machine runs.
//!
//! Wire format: every message is a frame of a 4-byte big-endian payload
//! length followed by a JSON document.
//!
//! ```text
//! -> {"op":"publish","user_id":"a","feature_index":0,"version":3,"published_at":0,"weights":"<base64 FSNN1>"}
//! <- {"ok":true,"accepted":true,"current_version":3}
//! <- {"ok":false,"reason":"stale version","accepted":false,"current_version":4}
//! -> {"op":"fetch","exclude_user":"a"}
//! <- {"ok":true,"entries":[{...entry as above, without "op"...}]}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{PoolClient, PoolEntry, PoolKey, PublishOutcome};
use crate::nn::{LayerSpec, MlpWeights};

pub const MAX_FRAME: usize = 16 * 1024 * 1024;

/// Environment variable naming the default pool endpoint.
pub const POOL_ENV: &str = "FEDSPARSE_POOL";

/// Latest entry per `(user, feature)` key.
#[derive(Debug, Default)]
pub struct PoolStore {
    entries: RwLock<BTreeMap<PoolKey, PoolEntry>>,
    head_shape: Option<Vec<LayerSpec>>,
}

impl PoolStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Store that only accepts heads of exactly this shape.
    pub fn with_head_shape(specs: Vec<LayerSpec>) -> Self {
        Self {
            entries: RwLock::default(),
            head_shape: Some(specs),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn version_of(&self, key: &PoolKey) -> Option<u64> {
        self.entries.read().unwrap().get(key).map(|e| e.version)
    }

    /// Accepts the entry iff its version is newer than the stored one.
    pub fn handle_publish(&self, entry: PoolEntry) -> Result<PublishOutcome> {
        if let Some(shape) = &self.head_shape {
            if &entry.weights.specs() != shape {
                return Err(Error::IncompatibleHead(format!(
                    "expected head shape {shape:?}"
                )));
            }
        }
        let key = entry.key();
        let mut map = self.entries.write().unwrap();
        match map.get(&key) {
            Some(cur) if cur.version >= entry.version => Ok(PublishOutcome {
                accepted: false,
                current_version: cur.version,
            }),
            _ => {
                let version = entry.version;
                map.insert(key, entry);
                Ok(PublishOutcome {
                    accepted: true,
                    current_version: version,
                })
            }
        }
    }

    /// Snapshot of all latest entries in key order, optionally without one user's.
    pub fn handle_fetch(&self, exclude_user: Option<&str>) -> Vec<PoolEntry> {
        self.entries
            .read()
            .unwrap()
            .values()
            .filter(|e| Some(e.user_id.as_str()) != exclude_user)
            .cloned()
            .collect()
    }
}

impl PoolClient for PoolStore {
    fn publish(&self, entry: &PoolEntry) -> Result<PublishOutcome> {
        self.handle_publish(entry.clone())
    }

    fn fetch(&self, exclude_user: Option<&str>) -> Result<Vec<PoolEntry>> {
        Ok(self.handle_fetch(exclude_user))
    }
}

/// Entry as it travels on the wire and sits in pool files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireEntry {
    pub user_id: String,
    pub feature_index: usize,
    pub version: u64,
    #[serde(default)]
    pub published_at: u64,
    /// Base64 of the `FSNN1` blob.
    pub weights: String,
}

impl From<&PoolEntry> for WireEntry {
    fn from(e: &PoolEntry) -> Self {
        Self {
            user_id: e.user_id.clone(),
            feature_index: e.feature_index,
            version: e.version,
            published_at: e.published_at,
            weights: B64.encode(e.weights.to_bytes()),
        }
    }
}

impl TryFrom<WireEntry> for PoolEntry {
    type Error = Error;

    fn try_from(w: WireEntry) -> Result<Self> {
        let bytes = B64
            .decode(w.weights.as_bytes())
            .map_err(|e| Error::Decode(format!("weights are not base64: {e}")))?;
        Ok(PoolEntry {
            user_id: w.user_id,
            feature_index: w.feature_index,
            version: w.version,
            weights: MlpWeights::from_bytes(&bytes)?,
            published_at: w.published_at,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Publish(WireEntry),
    Fetch {
        #[serde(default)]
        exclude_user: Option<String>,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_version: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entries: Option<Vec<WireEntry>>,
}

impl Response {
    fn error(reason: impl Into<String>) -> Self {
        Self {
            ok: false,
            reason: Some(reason.into()),
            ..Default::default()
        }
    }
}

pub fn write_frame<W: Write>(out: &mut W, payload: &[u8]) -> io::Result<()> {
    if payload.len() > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame too large"));
    }
    out.write_all(&(payload.len() as u32).to_be_bytes())?;
    out.write_all(payload)?;
    out.flush()
}

/// Reads one frame; `Ok(None)` on a clean end of stream before a header.
pub fn read_frame<R: Read>(input: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut header = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match input.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds limit"),
        ));
    }
    let mut payload = vec![0u8; len];
    input.read_exact(&mut payload)?;
    Ok(Some(payload))
}

/// Applies one encoded request to the store and encodes the response.
pub fn handle_request(store: &PoolStore, payload: &[u8]) -> Response {
    let request: Request = match serde_json::from_slice(payload) {
        Ok(r) => r,
        Err(e) => return Response::error(format!("malformed request: {e}")),
    };
    match request {
        Request::Publish(wire) => {
            let entry = match PoolEntry::try_from(wire) {
                Ok(e) => e,
                Err(e) => return Response::error(format!("malformed payload: {e}")),
            };
            match store.handle_publish(entry) {
                Ok(outcome) => Response {
                    ok: outcome.accepted,
                    reason: (!outcome.accepted).then(|| "stale version".to_string()),
                    accepted: Some(outcome.accepted),
                    current_version: Some(outcome.current_version),
                    entries: None,
                },
                Err(e) => Response::error(e.to_string()),
            }
        }
        Request::Fetch { exclude_user } => Response {
            ok: true,
            entries: Some(
                store
                    .handle_fetch(exclude_user.as_deref())
                    .iter()
                    .map(WireEntry::from)
                    .collect(),
            ),
            ..Default::default()
        },
    }
}

fn serve_connection(store: &PoolStore, mut stream: TcpStream) -> io::Result<()> {
    while let Some(payload) = read_frame(&mut stream)? {
        let response = handle_request(store, &payload);
        let body = serde_json::to_vec(&response).map_err(io::Error::other)?;
        write_frame(&mut stream, &body)?;
    }
    Ok(())
}

/// A running pool service. Dropping it stops accepting new connections.
pub struct PoolServer {
    addr: SocketAddr,
    store: Arc<PoolStore>,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl PoolServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn store(&self) -> &Arc<PoolStore> {
        &self.store
    }

    /// Blocks until the acceptor thread exits.
    pub fn join(mut self) {
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for PoolServer {
    fn drop(&mut self) {
        if self.acceptor.is_some() {
            self.shutdown();
        }
    }
}

/// Binds `addr` and serves the store, one thread per connection.
pub fn serve(addr: impl ToSocketAddrs, store: Arc<PoolStore>) -> Result<PoolServer> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let acceptor = {
        let store = Arc::clone(&store);
        let stop = Arc::clone(&stop);
        std::thread::Builder::new()
            .name("pool-accept".into())
            .spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let stream = match conn {
                        Ok(s) => s,
                        Err(e) => {
                            warn!("accept failed: {e}");
                            continue;
                        }
                    };
                    let store = Arc::clone(&store);
                    let _ = std::thread::Builder::new()
                        .name("pool-conn".into())
                        .spawn(move || {
                            let peer = stream.peer_addr().ok();
                            if let Err(e) = serve_connection(&store, stream) {
                                debug!("connection {peer:?} dropped: {e}");
                            }
                        });
                }
            })?
    };
    Ok(PoolServer {
        addr: local,
        store,
        stop,
        acceptor: Some(acceptor),
    })
}

/// Client for the TCP pool service. Keeps one connection and reconnects on failure.
pub struct TcpPoolClient {
    addr: String,
    timeout: Duration,
    conn: Mutex<Option<TcpStream>>,
}

impl TcpPoolClient {
    pub fn new(addr: impl Into<String>) -> Self {
        Self::with_timeout(addr, Duration::from_secs(5))
    }

    pub fn with_timeout(addr: impl Into<String>, timeout: Duration) -> Self {
        Self {
            addr: addr.into(),
            timeout,
            conn: Mutex::new(None),
        }
    }

    fn connect(&self) -> Result<TcpStream> {
        let transport = |e: io::Error| Error::Transport(format!("{}: {e}", self.addr));
        let mut last = None;
        for sa in self.addr.to_socket_addrs().map_err(transport)? {
            match TcpStream::connect_timeout(&sa, self.timeout) {
                Ok(s) => {
                    s.set_read_timeout(Some(self.timeout)).map_err(transport)?;
                    s.set_write_timeout(Some(self.timeout)).map_err(transport)?;
                    s.set_nodelay(true).ok();
                    return Ok(s);
                }
                Err(e) => last = Some(e),
            }
        }
        Err(transport(last.unwrap_or_else(|| io::ErrorKind::AddrNotAvailable.into())))
    }

    pub fn call(&self, request: &Request) -> Result<Response> {
        let body = serde_json::to_vec(request).map_err(|e| Error::Protocol(e.to_string()))?;
        let mut guard = self.conn.lock().unwrap();
        let mut stream = match guard.take() {
            Some(s) => s,
            None => self.connect()?,
        };
        let exchange = |s: &mut TcpStream| -> io::Result<Vec<u8>> {
            write_frame(s, &body)?;
            read_frame(s)?.ok_or_else(|| io::ErrorKind::UnexpectedEof.into())
        };
        let reply = match exchange(&mut stream) {
            Ok(r) => r,
            Err(_) => {
                // stale pooled connection; one fresh attempt
                stream = self.connect()?;
                exchange(&mut stream).map_err(|e| Error::Transport(format!("{}: {e}", self.addr)))?
            }
        };
        *guard = Some(stream);
        serde_json::from_slice(&reply).map_err(|e| Error::Protocol(format!("bad response: {e}")))
    }
}

impl PoolClient for TcpPoolClient {
    fn publish(&self, entry: &PoolEntry) -> Result<PublishOutcome> {
        let resp = self.call(&Request::Publish(entry.into()))?;
        match (resp.accepted, resp.current_version) {
            (Some(accepted), Some(current_version)) => Ok(PublishOutcome {
                accepted,
                current_version,
            }),
            _ => Err(Error::Protocol(
                resp.reason.unwrap_or_else(|| "publish failed".into()),
            )),
        }
    }

    fn fetch(&self, exclude_user: Option<&str>) -> Result<Vec<PoolEntry>> {
        let resp = self.call(&Request::Fetch {
            exclude_user: exclude_user.map(str::to_owned),
        })?;
        if !resp.ok {
            return Err(Error::Protocol(resp.reason.unwrap_or_default()));
        }
        resp.entries
            .unwrap_or_default()
            .into_iter()
            .map(PoolEntry::try_from)
            .collect()
    }
}

/// Directory-backed pool: one `<user>_<feature>.pool` JSON file per key,
/// replaced atomically by write-temp-then-rename.
pub struct FilePool {
    dir: PathBuf,
    lock: Mutex<()>,
}

impl FilePool {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let probe = dir.join(".probe");
        fs::write(&probe, b"")?;
        fs::remove_file(&probe)?;
        Ok(Self {
            dir,
            lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entry_path(&self, user_id: &str, feature_index: usize) -> PathBuf {
        let safe: String = user_id
            .bytes()
            .map(|b| {
                if b.is_ascii_alphanumeric() || b == b'-' {
                    (b as char).to_string()
                } else {
                    format!("%{b:02X}")
                }
            })
            .collect();
        self.dir.join(format!("{safe}_{feature_index}.pool"))
    }

    fn read_entry(path: &Path) -> Result<PoolEntry> {
        let wire: WireEntry = serde_json::from_slice(&fs::read(path)?)
            .map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
        PoolEntry::try_from(wire)
    }
}

impl PoolClient for FilePool {
    fn publish(&self, entry: &PoolEntry) -> Result<PublishOutcome> {
        let _guard = self.lock.lock().unwrap();
        let path = self.entry_path(&entry.user_id, entry.feature_index);
        if path.exists() {
            let cur = Self::read_entry(&path)?;
            if cur.version >= entry.version {
                return Ok(PublishOutcome {
                    accepted: false,
                    current_version: cur.version,
                });
            }
        }
        let body = serde_json::to_vec(&WireEntry::from(entry)).map_err(|e| Error::Protocol(e.to_string()))?;
        let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&body)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(PublishOutcome {
            accepted: true,
            current_version: entry.version,
        })
    }

    fn fetch(&self, exclude_user: Option<&str>) -> Result<Vec<PoolEntry>> {
        let mut out = Vec::new();
        for item in fs::read_dir(&self.dir)? {
            let path = item?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("pool") {
                continue;
            }
            let entry = Self::read_entry(&path)?;
            if Some(entry.user_id.as_str()) != exclude_user {
                out.push(entry);
            }
        }
        out.sort_by(|a, b| a.key().cmp(&b.key()));
        Ok(out)
    }
}

/// Opens a pool client from an endpoint string: `memory`, `file://<dir>`,
/// `tcp://<host:port>` or a bare `<host:port>`.
pub fn connect(endpoint: &str) -> Result<Arc<dyn PoolClient>> {
    if endpoint == "memory" {
        return Ok(Arc::new(PoolStore::new()));
    }
    if let Some(dir) = endpoint.strip_prefix("file://") {
        return Ok(Arc::new(FilePool::open(dir)?));
    }
    let addr = endpoint.strip_prefix("tcp://").unwrap_or(endpoint);
    Ok(Arc::new(TcpPoolClient::new(addr)))
}
