use std::collections::BTreeMap;
use std::fs;
use std::io::{ErrorKind, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::codec::read_message;
use super::Worker;
use crate::error::{Error, Result};

const FILE_POLL: Duration = Duration::from_millis(2);

/// Moves encoded messages between the coordinator and workers.
///
/// `send` must not block on the worker's computation, so a coordinator can
/// issue every request of a round before collecting any reply.
pub trait Transport {
    fn send(&mut self, machine: usize, bytes: &[u8]) -> Result<()>;
    /// Next reply from `machine`, or a transport error once `deadline` passes.
    fn recv(&mut self, machine: usize, deadline: Instant) -> Result<Vec<u8>>;
}

fn transport_err(machine: usize, reason: impl Into<String>) -> Error {
    Error::Transport {
        machine,
        reason: reason.into(),
    }
}

// ---- in-memory ----

struct Link {
    requests: Option<Sender<Vec<u8>>>,
    replies: Receiver<Vec<u8>>,
    handle: Option<JoinHandle<()>>,
}

/// Each worker runs on its own thread behind a pair of channels.
pub struct InMemoryCluster {
    links: BTreeMap<usize, Link>,
}

impl InMemoryCluster {
    pub fn spawn(workers: Vec<Worker>) -> Self {
        let mut links = BTreeMap::new();
        for mut worker in workers {
            let (req_tx, req_rx) = mpsc::channel::<Vec<u8>>();
            let (rep_tx, rep_rx) = mpsc::channel();
            let machine = worker.machine();
            let handle = thread::Builder::new()
                .name(format!("worker-{machine}"))
                .spawn(move || {
                    for request in req_rx {
                        if rep_tx.send(worker.handle_bytes(&request)).is_err() {
                            break;
                        }
                    }
                })
                .expect("spawn worker thread");
            links.insert(
                machine,
                Link {
                    requests: Some(req_tx),
                    replies: rep_rx,
                    handle: Some(handle),
                },
            );
        }
        InMemoryCluster { links }
    }

    /// Stops a worker; later traffic to it fails.
    pub fn kill(&mut self, machine: usize) {
        if let Some(link) = self.links.get_mut(&machine) {
            link.requests = None;
            if let Some(h) = link.handle.take() {
                let _ = h.join();
            }
        }
    }
}

impl Transport for InMemoryCluster {
    fn send(&mut self, machine: usize, bytes: &[u8]) -> Result<()> {
        let link = self.links.get(&machine).ok_or_else(|| transport_err(machine, "no such worker"))?;
        link.requests
            .as_ref()
            .ok_or_else(|| transport_err(machine, "worker stopped"))?
            .send(bytes.to_vec())
            .map_err(|_| transport_err(machine, "worker stopped"))
    }

    fn recv(&mut self, machine: usize, deadline: Instant) -> Result<Vec<u8>> {
        let link = self.links.get(&machine).ok_or_else(|| transport_err(machine, "no such worker"))?;
        let wait = deadline.saturating_duration_since(Instant::now());
        link.replies.recv_timeout(wait).map_err(|e| match e {
            RecvTimeoutError::Timeout => transport_err(machine, "timed out waiting for reply"),
            RecvTimeoutError::Disconnected => transport_err(machine, "worker stopped"),
        })
    }
}

impl Drop for InMemoryCluster {
    fn drop(&mut self) {
        for link in self.links.values_mut() {
            link.requests = None;
            if let Some(h) = link.handle.take() {
                let _ = h.join();
            }
        }
    }
}

// ---- files ----

pub fn request_path(dir: &Path, machine: usize) -> PathBuf {
    dir.join(format!("request_{machine}.bin"))
}

pub fn reply_path(dir: &Path, machine: usize) -> PathBuf {
    dir.join(format!("reply_{machine}.bin"))
}

/// A worker stops serving once this file exists.
pub fn stop_path(dir: &Path, machine: usize) -> PathBuf {
    dir.join(format!("stop_{machine}"))
}

/// Writes through a temporary name and renames, so readers never see a partial file.
fn publish(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("bin.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Coordinator side of the shared-directory transport.
pub struct FilesTransport {
    dir: PathBuf,
}

impl FilesTransport {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(FilesTransport { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl Transport for FilesTransport {
    fn send(&mut self, machine: usize, bytes: &[u8]) -> Result<()> {
        let stale = reply_path(&self.dir, machine);
        if stale.exists() {
            fs::remove_file(&stale).map_err(|e| transport_err(machine, format!("{}: {e}", stale.display())))?;
        }
        let path = request_path(&self.dir, machine);
        publish(&path, bytes).map_err(|e| transport_err(machine, format!("{}: {e}", path.display())))
    }

    fn recv(&mut self, machine: usize, deadline: Instant) -> Result<Vec<u8>> {
        let path = reply_path(&self.dir, machine);
        loop {
            match fs::read(&path) {
                Ok(bytes) => {
                    fs::remove_file(&path).map_err(|e| transport_err(machine, format!("{}: {e}", path.display())))?;
                    return Ok(bytes);
                }
                Err(e) if e.kind() == ErrorKind::NotFound => {}
                Err(e) => return Err(transport_err(machine, format!("{}: {e}", path.display()))),
            }
            if Instant::now() >= deadline {
                return Err(transport_err(machine, format!("timed out waiting for {}", path.display())));
            }
            thread::sleep(FILE_POLL);
        }
    }
}

/// Serves requests dropped into `dir` until `stop` is set or the stop file appears.
pub fn worker_serve_files(dir: &Path, worker: &mut Worker, stop: &AtomicBool) -> Result<()> {
    let machine = worker.machine();
    let request = request_path(dir, machine);
    let reply = reply_path(dir, machine);
    let stop_file = stop_path(dir, machine);
    loop {
        if stop.load(Ordering::Relaxed) || stop_file.exists() {
            return Ok(());
        }
        match fs::read(&request) {
            Ok(bytes) => {
                fs::remove_file(&request).map_err(|e| Error::io(&request, e))?;
                let out = worker.handle_bytes(&bytes);
                publish(&reply, &out).map_err(|e| Error::io(&reply, e))?;
            }
            Err(e) if e.kind() == ErrorKind::NotFound => thread::sleep(FILE_POLL),
            Err(e) => return Err(Error::io(&request, e)),
        }
    }
}

/// Worker threads serving a shared directory, plus the coordinator transport.
pub struct FilesCluster {
    transport: FilesTransport,
    workers: BTreeMap<usize, (Arc<AtomicBool>, Option<JoinHandle<()>>)>,
}

impl FilesCluster {
    pub fn spawn(dir: impl Into<PathBuf>, workers: Vec<Worker>) -> Result<Self> {
        let transport = FilesTransport::new(dir)?;
        let mut handles = BTreeMap::new();
        for mut worker in workers {
            let machine = worker.machine();
            let _ = fs::remove_file(stop_path(transport.dir(), machine));
            let stop = Arc::new(AtomicBool::new(false));
            let flag = Arc::clone(&stop);
            let dir = transport.dir().to_path_buf();
            let handle = thread::Builder::new()
                .name(format!("files-worker-{machine}"))
                .spawn(move || {
                    if let Err(e) = worker_serve_files(&dir, &mut worker, &flag) {
                        log::error!("files worker {machine}: {e}");
                    }
                })
                .expect("spawn worker thread");
            handles.insert(machine, (stop, Some(handle)));
        }
        Ok(FilesCluster {
            transport,
            workers: handles,
        })
    }

    pub fn kill(&mut self, machine: usize) {
        if let Some((stop, handle)) = self.workers.get_mut(&machine) {
            stop.store(true, Ordering::Relaxed);
            if let Some(h) = handle.take() {
                let _ = h.join();
            }
        }
    }
}

impl Transport for FilesCluster {
    fn send(&mut self, machine: usize, bytes: &[u8]) -> Result<()> {
        self.transport.send(machine, bytes)
    }

    fn recv(&mut self, machine: usize, deadline: Instant) -> Result<Vec<u8>> {
        self.transport.recv(machine, deadline)
    }
}

impl Drop for FilesCluster {
    fn drop(&mut self) {
        for (stop, handle) in self.workers.values_mut() {
            stop.store(true, Ordering::Relaxed);
            if let Some(h) = handle.take() {
                let _ = h.join();
            }
        }
    }
}

// ---- tcp ----

/// Coordinator side of the TCP transport: one connection per worker, opened on first use.
pub struct TcpTransport {
    endpoints: BTreeMap<usize, SocketAddr>,
    streams: BTreeMap<usize, TcpStream>,
    connect_timeout: Duration,
}

impl TcpTransport {
    pub fn new(endpoints: BTreeMap<usize, SocketAddr>, connect_timeout: Duration) -> Self {
        TcpTransport {
            endpoints,
            streams: BTreeMap::new(),
            connect_timeout,
        }
    }

    fn stream(&mut self, machine: usize) -> Result<&mut TcpStream> {
        if !self.streams.contains_key(&machine) {
            let addr = *self
                .endpoints
                .get(&machine)
                .ok_or_else(|| transport_err(machine, "no endpoint configured"))?;
            let s = TcpStream::connect_timeout(&addr, self.connect_timeout)
                .map_err(|e| transport_err(machine, format!("connect {addr}: {e}")))?;
            s.set_nodelay(true).map_err(|e| transport_err(machine, e.to_string()))?;
            self.streams.insert(machine, s);
        }
        Ok(self.streams.get_mut(&machine).unwrap())
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, machine: usize, bytes: &[u8]) -> Result<()> {
        let res = self.stream(machine)?.write_all(bytes);
        res.map_err(|e| {
            self.streams.remove(&machine);
            transport_err(machine, format!("write: {e}"))
        })
    }

    fn recv(&mut self, machine: usize, deadline: Instant) -> Result<Vec<u8>> {
        let wait = deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1));
        let stream = self.stream(machine)?;
        stream
            .set_read_timeout(Some(wait))
            .map_err(|e| transport_err(machine, e.to_string()))?;
        let res = read_message(stream);
        match res {
            Ok(Some(buf)) => Ok(buf),
            Ok(None) => {
                self.streams.remove(&machine);
                Err(transport_err(machine, "connection closed by worker"))
            }
            Err(e) => {
                self.streams.remove(&machine);
                let reason = if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) {
                    "timed out waiting for reply".to_string()
                } else {
                    format!("read: {e}")
                };
                Err(transport_err(machine, reason))
            }
        }
    }
}

/// Serves one connection until the peer closes it. Undecodable messages get an
/// `Error` reply and the connection stays open.
pub fn serve_connection(stream: &mut TcpStream, worker: &mut Worker) -> std::io::Result<()> {
    loop {
        match read_message(stream)? {
            Some(buf) => {
                let reply = worker.handle_bytes(&buf);
                stream.write_all(&reply)?;
            }
            None => return Ok(()),
        }
    }
}

/// Accepts connections on `listener` one at a time until `stop` is set.
pub fn worker_serve_tcp(listener: TcpListener, worker: &mut Worker, stop: &AtomicBool) -> Result<()> {
    worker_serve_tcp_tracked(listener, worker, stop, &Mutex::new(None))
}

fn worker_serve_tcp_tracked(
    listener: TcpListener,
    worker: &mut Worker,
    stop: &AtomicBool,
    active: &Mutex<Option<TcpStream>>,
) -> Result<()> {
    let addr = listener.local_addr().ok();
    for conn in listener.incoming() {
        if stop.load(Ordering::Relaxed) {
            break;
        }
        let mut stream = match conn {
            Ok(s) => s,
            Err(e) => {
                log::warn!("worker {}: accept failed: {e}", worker.machine());
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        *active.lock().unwrap() = stream.try_clone().ok();
        if let Err(e) = serve_connection(&mut stream, worker) {
            if !stop.load(Ordering::Relaxed) {
                log::warn!("worker {} on {:?}: connection ended: {e}", worker.machine(), addr);
            }
        }
        *active.lock().unwrap() = None;
        if stop.load(Ordering::Relaxed) {
            break;
        }
    }
    Ok(())
}

struct TcpWorkerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    active: Arc<Mutex<Option<TcpStream>>>,
    handle: Option<JoinHandle<()>>,
}

impl TcpWorkerHandle {
    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(s) = self.active.lock().unwrap().take() {
            let _ = s.shutdown(Shutdown::Both);
        }
        // Wake a blocked accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Workers listening on loopback ports, plus a connected coordinator transport.
pub struct TcpCluster {
    transport: TcpTransport,
    workers: BTreeMap<usize, TcpWorkerHandle>,
}

impl TcpCluster {
    pub fn spawn_local(workers: Vec<Worker>, connect_timeout: Duration) -> Result<Self> {
        let mut endpoints = BTreeMap::new();
        let mut handles = BTreeMap::new();
        for mut worker in workers {
            let machine = worker.machine();
            let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| transport_err(machine, format!("bind: {e}")))?;
            let addr = listener.local_addr().map_err(|e| transport_err(machine, e.to_string()))?;
            let stop = Arc::new(AtomicBool::new(false));
            let active = Arc::new(Mutex::new(None));
            let (flag, slot) = (Arc::clone(&stop), Arc::clone(&active));
            let handle = thread::Builder::new()
                .name(format!("tcp-worker-{machine}"))
                .spawn(move || {
                    let _ = worker_serve_tcp_tracked(listener, &mut worker, &flag, &slot);
                })
                .expect("spawn worker thread");
            endpoints.insert(machine, addr);
            handles.insert(
                machine,
                TcpWorkerHandle {
                    addr,
                    stop,
                    active,
                    handle: Some(handle),
                },
            );
        }
        Ok(TcpCluster {
            transport: TcpTransport::new(endpoints, connect_timeout),
            workers: handles,
        })
    }

    pub fn endpoint(&self, machine: usize) -> Option<SocketAddr> {
        self.workers.get(&machine).map(|w| w.addr)
    }

    /// Closes a worker's socket and stops its thread.
    pub fn kill(&mut self, machine: usize) {
        if let Some(w) = self.workers.get_mut(&machine) {
            w.shutdown();
        }
    }
}

impl Transport for TcpCluster {
    fn send(&mut self, machine: usize, bytes: &[u8]) -> Result<()> {
        self.transport.send(machine, bytes)
    }

    fn recv(&mut self, machine: usize, deadline: Instant) -> Result<Vec<u8>> {
        self.transport.recv(machine, deadline)
    }
}

impl Drop for TcpCluster {
    fn drop(&mut self) {
        self.transport.streams.clear();
        for w in self.workers.values_mut() {
            w.shutdown();
        }
    }
}
