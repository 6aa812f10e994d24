// SPDX-License-Identifier: Apache-2.0

//! Object storage at rest, plain or encrypted, local or behind a daemon.
//!
//! Encrypted object layout (all integers big-endian):
//!
//! ```text
//! "EDST" | version u16 | chunk_size u32 | plaintext_len u64 | salt[16]
//!        | nonce_prefix[4] | wrapped_file_key[48]
//!        | name_len u16 | encrypted_name[name_len + 16]
//!        | chunk 0 | chunk 1 | ...      (each ciphertext || 16-byte tag)
//! ```
//!
//! The file key is random per object and wrapped with AES-256-GCM under a
//! key derived from the master key and the object's salt; everything in
//! the header before the wrapped key is bound as associated data. Chunk `i`
//! uses nonce `nonce_prefix || i` and associated data `i`. The object name
//! is encrypted under nonce `nonce_prefix || u64::MAX`, and the file itself
//! is stored under a keyed hash of the name.
//!
//! The master key lives on disk only in sealed form (`keys/sealed.key`):
//!
//! ```text
//! "EDSK" | version u16 | sha256(measurement)[32] | salt[16] | nonce[12] | wrapped_master[48]
//! ```
//!
//! wrapped under an Argon2id hash of the measurement string.

use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use aes_gcm::aead::{Aead, Payload};
use aes_gcm::{Aes256Gcm, KeyInit, Nonce};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("invalid object name {0:?} (1-128 of [A-Za-z0-9._-])")]
    Name(String),
    #[error("no object named {0:?}")]
    NotFound(String),
    #[error("not a store object (bad magic)")]
    Magic,
    #[error("unsupported format version {0}")]
    Version(u16),
    #[error("chunk size {0} outside 4096..=1048576")]
    ChunkSize(u32),
    #[error("object header failed authentication")]
    HeaderAuth,
    #[error("chunk {0} failed authentication")]
    ChunkAuth(u64),
    #[error("length mismatch: header says {expected} plaintext bytes, stored chunks hold {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("object is stored under another name")]
    NameMismatch,
    #[error("measurement does not match the sealed key")]
    Measurement,
    #[error("sealed key failed authentication")]
    SealedAuth,
    #[error("malformed sealed key file")]
    SealedFormat,
    #[error("object of {0} bytes exceeds the 1 GiB limit")]
    TooLarge(u64),
    #[error("store protocol: {0}")]
    Protocol(String),
    #[error("store daemon: {0}")]
    Remote(String),
    #[error("key derivation: {0}")]
    Kdf(String),
}

type Result<T> = std::result::Result<T, StoreError>;

pub const DEFAULT_CHUNK_SIZE: u32 = 65536;
pub const MAX_OBJECT: u64 = 1 << 30;
const MAGIC: &[u8; 4] = b"EDST";
const SEALED_MAGIC: &[u8; 4] = b"EDSK";
const VERSION: u16 = 1;
const TAG: usize = 16;
const FIXED_HEADER: usize = 4 + 2 + 4 + 8 + 16 + 4;
const WRAPPED: usize = 32 + TAG;

/// Deployment variant of the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreMode {
    /// Direct file I/O, no daemon.
    Passthrough,
    /// Daemon storing plaintext.
    SidecarPlain,
    /// Daemon holding the unsealed key and storing ciphertext.
    SidecarEncrypted,
}

impl FromStr for StoreMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "passthrough" => Ok(Self::Passthrough),
            "sidecar" => Ok(Self::SidecarPlain),
            "sidecar-enc" => Ok(Self::SidecarEncrypted),
            _ => Err(format!("unknown store mode {s:?} (passthrough, sidecar, sidecar-enc)")),
        }
    }
}

impl fmt::Display for StoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Passthrough => "passthrough",
            Self::SidecarPlain => "sidecar",
            Self::SidecarEncrypted => "sidecar-enc",
        })
    }
}

pub fn validate_name(name: &str) -> Result<()> {
    let ok = (1..=128).contains(&name.len())
        && name != "."
        && name != ".."
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::Name(name.to_string()))
    }
}

/// put / get / list over named byte objects.
pub trait ObjectStore: Send + Sync {
    /// Stores `data` under `name`, replacing any previous object, and
    /// returns the on-disk object id.
    fn put(&self, name: &str, data: &[u8]) -> Result<String>;
    fn get(&self, name: &str) -> Result<Vec<u8>>;
    /// Names in sorted order.
    fn list(&self) -> Result<Vec<String>>;
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes `data` to `dir/file` via a temporary file and a rename.
fn atomic_write(dir: &Path, file: &str, data: &[u8]) -> Result<()> {
    let tmp_dir = dir.join(".tmp");
    fs::create_dir_all(&tmp_dir)?;
    let tmp = tmp_dir.join(format!(
        "{}-{}-{file}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(data)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, dir.join(file))?;
    Ok(())
}

fn read_object(path: &Path, name: &str) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => StoreError::NotFound(name.to_string()),
        _ => e.into(),
    })
}

fn regular_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(e.into()),
    };
    for e in entries {
        let e = e?;
        if e.file_type()?.is_file() {
            if let Ok(n) = e.file_name().into_string() {
                out.push((n, e.path()));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Objects stored verbatim at `<root>/objects/<name>`.
#[derive(Debug, Clone)]
pub struct PlainStore {
    dir: PathBuf,
}

impl PlainStore {
    pub fn open(root: &Path) -> Result<Self> {
        let dir = root.join("objects");
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn object_path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

impl ObjectStore for PlainStore {
    fn put(&self, name: &str, data: &[u8]) -> Result<String> {
        validate_name(name)?;
        if data.len() as u64 > MAX_OBJECT {
            return Err(StoreError::TooLarge(data.len() as u64));
        }
        atomic_write(&self.dir, name, data)?;
        Ok(name.to_string())
    }

    fn get(&self, name: &str) -> Result<Vec<u8>> {
        validate_name(name)?;
        read_object(&self.dir.join(name), name)
    }

    fn list(&self) -> Result<Vec<String>> {
        Ok(regular_files(&self.dir)?.into_iter().map(|(n, _)| n).collect())
    }
}

fn gcm(key: &[u8; 32]) -> Aes256Gcm {
    Aes256Gcm::new(key.into())
}

fn hkdf32(ikm: &[u8], salt: Option<&[u8]>, info: &[u8]) -> [u8; 32] {
    let mut out = [0u8; 32];
    Hkdf::<Sha256>::new(salt, ikm)
        .expand(info, &mut out)
        .expect("32 bytes is a valid HKDF length");
    out
}

fn chunk_nonce(prefix: &[u8; 4], index: u64) -> [u8; 12] {
    let mut n = [0u8; 12];
    n[..4].copy_from_slice(prefix);
    n[4..].copy_from_slice(&index.to_be_bytes());
    n
}

struct Header {
    chunk_size: u32,
    plaintext_len: u64,
    prefix: [u8; 4],
    file_key: [u8; 32],
    name: String,
    body_offset: usize,
}

/// Chunked AEAD store under a master key.
#[derive(Clone)]
pub struct EncryptedStore {
    dir: PathBuf,
    master: [u8; 32],
    name_key: [u8; 32],
    chunk_size: u32,
}

impl fmt::Debug for EncryptedStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EncryptedStore")
            .field("dir", &self.dir)
            .field("chunk_size", &self.chunk_size)
            .finish_non_exhaustive()
    }
}

impl EncryptedStore {
    pub fn open(root: &Path, master: [u8; 32]) -> Result<Self> {
        Self::with_chunk_size(root, master, DEFAULT_CHUNK_SIZE)
    }

    pub fn with_chunk_size(root: &Path, master: [u8; 32], chunk_size: u32) -> Result<Self> {
        if !(4096..=1 << 20).contains(&chunk_size) {
            return Err(StoreError::ChunkSize(chunk_size));
        }
        let dir = root.join("objects");
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            master,
            name_key: hkdf32(&master, None, b"opcvault name alias"),
            chunk_size,
        })
    }

    /// Keyed-hash file name under which `name` is stored.
    pub fn alias(&self, name: &str) -> String {
        let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(&self.name_key).expect("any key length");
        mac.update(name.as_bytes());
        hex::encode(mac.finalize().into_bytes())
    }

    pub fn object_path(&self, name: &str) -> PathBuf {
        self.dir.join(self.alias(name))
    }

    fn encrypt(&self, name: &str, data: &[u8]) -> Vec<u8> {
        let mut rng = rand::thread_rng();
        let mut salt = [0u8; 16];
        let mut prefix = [0u8; 4];
        let mut file_key = [0u8; 32];
        rng.fill_bytes(&mut salt);
        rng.fill_bytes(&mut prefix);
        rng.fill_bytes(&mut file_key);

        let mut out = Vec::with_capacity(data.len() + data.len() / self.chunk_size as usize * TAG + 256);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_be_bytes());
        out.extend_from_slice(&self.chunk_size.to_be_bytes());
        out.extend_from_slice(&(data.len() as u64).to_be_bytes());
        out.extend_from_slice(&salt);
        out.extend_from_slice(&prefix);
        let wrap_key = hkdf32(&self.master, Some(&salt), b"opcvault file key wrap");
        let wrapped = gcm(&wrap_key)
            .encrypt(Nonce::from_slice(&[0u8; 12]), Payload { msg: &file_key, aad: &out })
            .expect("in-memory encryption");
        out.extend_from_slice(&wrapped);

        let cipher = gcm(&file_key);
        let enc_name = cipher
            .encrypt(
                Nonce::from_slice(&chunk_nonce(&prefix, u64::MAX)),
                Payload { msg: name.as_bytes(), aad: b"name" },
            )
            .expect("in-memory encryption");
        out.extend_from_slice(&(name.len() as u16).to_be_bytes());
        out.extend_from_slice(&enc_name);

        for (i, chunk) in data.chunks(self.chunk_size as usize).enumerate() {
            let idx = (i as u64).to_be_bytes();
            let ct = cipher
                .encrypt(
                    Nonce::from_slice(&chunk_nonce(&prefix, i as u64)),
                    Payload { msg: chunk, aad: &idx },
                )
                .expect("in-memory encryption");
            out.extend_from_slice(&ct);
        }
        out
    }

    fn header(&self, raw: &[u8]) -> Result<Header> {
        if raw.len() < 6 || &raw[..4] != MAGIC {
            return Err(StoreError::Magic);
        }
        let version = u16::from_be_bytes([raw[4], raw[5]]);
        if version != VERSION {
            return Err(StoreError::Version(version));
        }
        if raw.len() < FIXED_HEADER + WRAPPED + 2 {
            return Err(StoreError::HeaderAuth);
        }
        let chunk_size = u32::from_be_bytes(raw[6..10].try_into().unwrap());
        if !(4096..=1 << 20).contains(&chunk_size) {
            return Err(StoreError::ChunkSize(chunk_size));
        }
        let plaintext_len = u64::from_be_bytes(raw[10..18].try_into().unwrap());
        let salt = &raw[18..34];
        let prefix: [u8; 4] = raw[34..38].try_into().unwrap();
        let wrap_key = hkdf32(&self.master, Some(salt), b"opcvault file key wrap");
        let file_key: [u8; 32] = gcm(&wrap_key)
            .decrypt(
                Nonce::from_slice(&[0u8; 12]),
                Payload {
                    msg: &raw[FIXED_HEADER..FIXED_HEADER + WRAPPED],
                    aad: &raw[..FIXED_HEADER],
                },
            )
            .map_err(|_| StoreError::HeaderAuth)?
            .try_into()
            .map_err(|_| StoreError::HeaderAuth)?;
        let p = FIXED_HEADER + WRAPPED;
        let name_len = u16::from_be_bytes([raw[p], raw[p + 1]]) as usize;
        let name_end = p + 2 + name_len + TAG;
        if raw.len() < name_end {
            return Err(StoreError::HeaderAuth);
        }
        let name = gcm(&file_key)
            .decrypt(
                Nonce::from_slice(&chunk_nonce(&prefix, u64::MAX)),
                Payload {
                    msg: &raw[p + 2..name_end],
                    aad: b"name",
                },
            )
            .map_err(|_| StoreError::HeaderAuth)?;
        let name = String::from_utf8(name).map_err(|_| StoreError::HeaderAuth)?;
        Ok(Header {
            chunk_size,
            plaintext_len,
            prefix,
            file_key,
            name,
            body_offset: name_end,
        })
    }

    fn decrypt(&self, raw: &[u8], h: &Header) -> Result<Vec<u8>> {
        let body = &raw[h.body_offset..];
        let cs = h.chunk_size as u64;
        let full = cs + TAG as u64;
        let n_chunks = h.plaintext_len.div_ceil(cs);
        let expected_body = if n_chunks == 0 {
            0
        } else {
            (n_chunks - 1) * full + (h.plaintext_len - (n_chunks - 1) * cs) + TAG as u64
        };
        if body.len() as u64 != expected_body {
            // what the stored chunks could hold at most
            let whole = body.len() as u64 / full;
            let rest = (body.len() as u64 % full).saturating_sub(TAG as u64);
            return Err(StoreError::Truncated {
                expected: h.plaintext_len,
                found: whole * cs + rest,
            });
        }
        let cipher = gcm(&h.file_key);
        let mut out = Vec::with_capacity(h.plaintext_len as usize);
        for (i, ct) in body.chunks(full as usize).enumerate() {
            let idx = (i as u64).to_be_bytes();
            let pt = cipher
                .decrypt(
                    Nonce::from_slice(&chunk_nonce(&h.prefix, i as u64)),
                    Payload { msg: ct, aad: &idx },
                )
                .map_err(|_| StoreError::ChunkAuth(i as u64))?;
            out.extend_from_slice(&pt);
        }
        Ok(out)
    }
}

impl ObjectStore for EncryptedStore {
    fn put(&self, name: &str, data: &[u8]) -> Result<String> {
        validate_name(name)?;
        if data.len() as u64 > MAX_OBJECT {
            return Err(StoreError::TooLarge(data.len() as u64));
        }
        let alias = self.alias(name);
        atomic_write(&self.dir, &alias, &self.encrypt(name, data))?;
        Ok(alias)
    }

    fn get(&self, name: &str) -> Result<Vec<u8>> {
        validate_name(name)?;
        let raw = read_object(&self.object_path(name), name)?;
        let h = self.header(&raw)?;
        if h.name != name {
            return Err(StoreError::NameMismatch);
        }
        self.decrypt(&raw, &h)
    }

    fn list(&self) -> Result<Vec<String>> {
        let mut names = Vec::new();
        for (_, path) in regular_files(&self.dir)? {
            let raw = fs::read(&path)?;
            names.push(self.header(&raw)?.name);
        }
        names.sort();
        Ok(names)
    }
}

/// Master key wrapped under a measurement-derived key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedKey {
    pub measurement_digest: [u8; 32],
    pub salt: [u8; 16],
    pub nonce: [u8; 12],
    pub wrapped: Vec<u8>,
}

fn measurement_key(measurement: &str, salt: &[u8; 16]) -> Result<[u8; 32]> {
    let params = argon2::Params::new(8 * 1024, 2, 1, Some(32)).map_err(|e| StoreError::Kdf(e.to_string()))?;
    let kdf = argon2::Argon2::new(argon2::Algorithm::Argon2id, argon2::Version::V0x13, params);
    let mut out = [0u8; 32];
    kdf.hash_password_into(measurement.as_bytes(), salt, &mut out)
        .map_err(|e| StoreError::Kdf(e.to_string()))?;
    Ok(out)
}

/// Seals with fresh random salt and nonce.
pub fn seal_key(master: &[u8; 32], measurement: &str) -> Result<SealedKey> {
    let mut salt = [0u8; 16];
    let mut nonce = [0u8; 12];
    rand::thread_rng().fill_bytes(&mut salt);
    rand::thread_rng().fill_bytes(&mut nonce);
    seal_key_with(master, measurement, salt, nonce)
}

/// Deterministic sealing for fixed salt and nonce.
pub fn seal_key_with(master: &[u8; 32], measurement: &str, salt: [u8; 16], nonce: [u8; 12]) -> Result<SealedKey> {
    if measurement.is_empty() {
        return Err(StoreError::Measurement);
    }
    let digest: [u8; 32] = Sha256::digest(measurement.as_bytes()).into();
    let key = measurement_key(measurement, &salt)?;
    let wrapped = gcm(&key)
        .encrypt(Nonce::from_slice(&nonce), Payload { msg: master, aad: &digest })
        .expect("in-memory encryption");
    Ok(SealedKey {
        measurement_digest: digest,
        salt,
        nonce,
        wrapped,
    })
}

/// Releases the master key only for the sealing measurement.
pub fn unseal_key(sealed: &SealedKey, measurement: &str) -> Result<[u8; 32]> {
    let digest: [u8; 32] = Sha256::digest(measurement.as_bytes()).into();
    let key = measurement_key(measurement, &sealed.salt)?;
    let open = |aad: &[u8]| {
        gcm(&key)
            .decrypt(Nonce::from_slice(&sealed.nonce), Payload { msg: &sealed.wrapped, aad })
            .ok()
    };
    if digest != sealed.measurement_digest {
        // a tampered digest with the right measurement still opens under
        // the true digest; report that as tampering, never as a key
        return Err(match open(&digest) {
            Some(_) => StoreError::SealedAuth,
            None => StoreError::Measurement,
        });
    }
    let master = open(&digest).ok_or(StoreError::SealedAuth)?;
    master.try_into().map_err(|_| StoreError::SealedAuth)
}

impl SealedKey {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 2 + 32 + 16 + 12 + self.wrapped.len());
        out.extend_from_slice(SEALED_MAGIC);
        out.extend_from_slice(&VERSION.to_be_bytes());
        out.extend_from_slice(&self.measurement_digest);
        out.extend_from_slice(&self.salt);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.wrapped);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() != 4 + 2 + 32 + 16 + 12 + WRAPPED || &b[..4] != SEALED_MAGIC {
            return Err(StoreError::SealedFormat);
        }
        let version = u16::from_be_bytes([b[4], b[5]]);
        if version != VERSION {
            return Err(StoreError::Version(version));
        }
        Ok(Self {
            measurement_digest: b[6..38].try_into().unwrap(),
            salt: b[38..54].try_into().unwrap(),
            nonce: b[54..66].try_into().unwrap(),
            wrapped: b[66..].to_vec(),
        })
    }
}

pub fn sealed_key_path(root: &Path) -> PathBuf {
    root.join("keys").join("sealed.key")
}

pub fn write_sealed(root: &Path, sealed: &SealedKey) -> Result<()> {
    let dir = root.join("keys");
    fs::create_dir_all(&dir)?;
    atomic_write(&dir, "sealed.key", &sealed.to_bytes())
}

pub fn read_sealed(root: &Path) -> Result<SealedKey> {
    SealedKey::from_bytes(&fs::read(sealed_key_path(root))?)
}

/// Fresh random master key.
pub fn new_master_key() -> [u8; 32] {
    let mut k = [0u8; 32];
    rand::thread_rng().fill_bytes(&mut k);
    k
}

// wire protocol
const OP_PUT: u8 = 0x10;
const OP_GET: u8 = 0x11;
const OP_LIST: u8 = 0x12;
const ST_OK: u8 = 0x20;
const ST_ERR: u8 = 0x21;
const MAX_MESSAGE: u64 = MAX_OBJECT + 1 + 2 + 128;

fn write_msg(w: &mut impl Write, head: &[u8], body: &[u8]) -> io::Result<()> {
    let len = (head.len() + body.len()) as u32;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(head)?;
    w.write_all(body)?;
    w.flush()
}

/// Reads one length-prefixed message; `None` on clean EOF before it starts.
fn read_msg(r: &mut impl Read) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as u64;
    if len > MAX_MESSAGE {
        return Err(StoreError::TooLarge(len));
    }
    let mut buf = Vec::new();
    r.take(len).read_to_end(&mut buf)?;
    if buf.len() as u64 != len {
        return Err(StoreError::Protocol("truncated message".into()));
    }
    Ok(Some(buf))
}

fn request_head(op: u8, name: &str) -> Vec<u8> {
    let mut h = vec![op];
    h.extend_from_slice(&(name.len() as u16).to_be_bytes());
    h.extend_from_slice(name.as_bytes());
    h
}

/// Client of a store daemon.
#[derive(Debug, Clone)]
pub struct StoreClient {
    addr: SocketAddr,
}

impl StoreClient {
    pub fn new(addr: impl ToSocketAddrs) -> Result<Self> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| StoreError::Protocol("address resolves to nothing".into()))?;
        Ok(Self { addr })
    }

    fn call(&self, op: u8, name: &str, payload: &[u8]) -> Result<Vec<u8>> {
        if payload.len() as u64 > MAX_OBJECT {
            return Err(StoreError::TooLarge(payload.len() as u64));
        }
        let mut s = TcpStream::connect(self.addr)?;
        s.set_nodelay(true)?;
        write_msg(&mut s, &request_head(op, name), payload)?;
        let resp = read_msg(&mut s)?.ok_or_else(|| StoreError::Protocol("connection closed".into()))?;
        match resp.split_first() {
            Some((&ST_OK, body)) => Ok(body.to_vec()),
            Some((&ST_ERR, body)) => Err(StoreError::Remote(String::from_utf8_lossy(body).into_owned())),
            _ => Err(StoreError::Protocol("bad response status".into())),
        }
    }

    /// True once the daemon answers a listing.
    pub fn ready(&self) -> bool {
        self.list().is_ok()
    }
}

impl ObjectStore for StoreClient {
    fn put(&self, name: &str, data: &[u8]) -> Result<String> {
        validate_name(name)?;
        let id = self.call(OP_PUT, name, data)?;
        String::from_utf8(id).map_err(|_| StoreError::Protocol("non-UTF-8 object id".into()))
    }

    fn get(&self, name: &str) -> Result<Vec<u8>> {
        validate_name(name)?;
        self.call(OP_GET, name, &[])
    }

    fn list(&self) -> Result<Vec<String>> {
        let body = self.call(OP_LIST, "", &[])?;
        let text = String::from_utf8(body).map_err(|_| StoreError::Protocol("non-UTF-8 listing".into()))?;
        Ok(text.lines().map(str::to_string).collect())
    }
}

/// Backend the daemon serves, or why it refuses to.
enum Backend {
    Open(Box<dyn ObjectStore>),
    Locked(String),
}

fn handle(backend: &Backend, msg: &[u8]) -> std::result::Result<Vec<u8>, String> {
    let store = match backend {
        Backend::Open(s) => s,
        Backend::Locked(why) => return Err(format!("store locked: {why}")),
    };
    let (&op, rest) = msg.split_first().ok_or("empty request")?;
    if rest.len() < 2 {
        return Err("short request".into());
    }
    let nlen = u16::from_be_bytes([rest[0], rest[1]]) as usize;
    if rest.len() < 2 + nlen {
        return Err("short request".into());
    }
    let name = std::str::from_utf8(&rest[2..2 + nlen]).map_err(|_| "name is not UTF-8")?;
    let payload = &rest[2 + nlen..];
    let r = match op {
        OP_PUT => store.put(name, payload).map(String::into_bytes),
        OP_GET => store.get(name),
        OP_LIST => store.list().map(|names| names.join("\n").into_bytes()),
        _ => return Err(format!("unknown op 0x{op:02x}")),
    };
    r.map_err(|e| e.to_string())
}

fn serve_conn(backend: &Backend, mut s: TcpStream) {
    loop {
        let msg = match read_msg(&mut s) {
            Ok(Some(m)) => m,
            Ok(None) => return,
            Err(e) => {
                let _ = write_msg(&mut s, &[ST_ERR], e.to_string().as_bytes());
                return;
            }
        };
        let sent = match handle(backend, &msg) {
            Ok(body) => write_msg(&mut s, &[ST_OK], &body),
            Err(why) => {
                log::debug!("store request failed: {why}");
                write_msg(&mut s, &[ST_ERR], why.as_bytes())
            }
        };
        if sent.is_err() {
            return;
        }
    }
}

/// A running store daemon.
pub struct StoreDaemon {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
    locked: Option<String>,
}

impl fmt::Debug for StoreDaemon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StoreDaemon")
            .field("addr", &self.addr)
            .field("locked", &self.locked)
            .finish()
    }
}

impl StoreDaemon {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Why the daemon refuses to serve, if it does.
    pub fn locked(&self) -> Option<&str> {
        self.locked.as_deref()
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Blocks until the process is killed.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for StoreDaemon {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_now();
        }
    }
}

/// Starts a daemon over `root`. In encrypted mode the master key is
/// unsealed from `<root>/keys/sealed.key` with `measurement`; if that
/// fails the daemon still listens but refuses every request.
pub fn store_serve(
    addr: impl ToSocketAddrs,
    root: &Path,
    mode: StoreMode,
    measurement: Option<&str>,
) -> Result<StoreDaemon> {
    if !root.is_dir() {
        return Err(StoreError::Io(io::Error::new(
            io::ErrorKind::NotFound,
            format!("store root {} is not a directory", root.display()),
        )));
    }
    let backend = match mode {
        StoreMode::SidecarEncrypted => {
            let opened = read_sealed(root)
                .and_then(|s| unseal_key(&s, measurement.unwrap_or("")))
                .and_then(|k| EncryptedStore::open(root, k));
            match opened {
                Ok(s) => Backend::Open(Box::new(s)),
                Err(e) => {
                    log::error!("store daemon locked: {e}");
                    Backend::Locked(e.to_string())
                }
            }
        }
        _ => Backend::Open(Box::new(PlainStore::open(root)?)),
    };
    let locked = match &backend {
        Backend::Locked(w) => Some(w.clone()),
        Backend::Open(_) => None,
    };
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let backend = Arc::new(backend);
    let stop2 = stop.clone();
    let thread = std::thread::Builder::new()
        .name("store-daemon".into())
        .spawn(move || {
            for conn in listener.incoming() {
                if stop2.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(s) = conn else { continue };
                let b = backend.clone();
                let _ = std::thread::Builder::new()
                    .name("store-session".into())
                    .spawn(move || serve_conn(&b, s));
            }
        })?;
    Ok(StoreDaemon {
        addr,
        stop,
        thread: Some(thread),
        locked,
    })
}

/// The store a run reads and writes through.
pub fn open_store(mode: StoreMode, root: &Path, addr: Option<SocketAddr>) -> Result<Box<dyn ObjectStore>> {
    match mode {
        StoreMode::Passthrough => Ok(Box::new(PlainStore::open(root)?)),
        _ => {
            let a = addr.ok_or_else(|| StoreError::Protocol("sidecar modes need a daemon address".into()))?;
            Ok(Box::new(StoreClient::new(a)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn key() -> [u8; 32] {
        [7u8; 32]
    }

    fn blob(n: usize, seed: u64) -> Vec<u8> {
        let mut v = vec![0u8; n];
        rand_chacha::ChaCha8Rng::seed_from_u64(seed).fill(&mut v[..]);
        v
    }

    #[test]
    fn names_are_validated() {
        for ok in ["a", "l1.lay", "A-b_c.9", &"x".repeat(128)] {
            assert!(validate_name(ok).is_ok(), "{ok}");
        }
        for bad in ["", ".", "..", "a/b", "a b", "é", &"x".repeat(129)] {
            assert!(validate_name(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn encrypted_round_trip_various_sizes() {
        let tmp = tempfile::tempdir().unwrap();
        let s = EncryptedStore::with_chunk_size(tmp.path(), key(), 4096).unwrap();
        for (i, n) in [0usize, 1, 4095, 4096, 4097, 3 * 4096, 20_000].into_iter().enumerate() {
            let d = blob(n, i as u64);
            let name = format!("obj{i}");
            s.put(&name, &d).unwrap();
            assert_eq!(s.get(&name).unwrap(), d, "size {n}");
        }
        let names = s.list().unwrap();
        assert_eq!(names.len(), 7);
        assert!(names.windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(s.get("missing"), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn aliases_hide_names() {
        let tmp = tempfile::tempdir().unwrap();
        let s = EncryptedStore::open(tmp.path(), key()).unwrap();
        let id = s.put("secret-pdk.lay", b"x").unwrap();
        assert_eq!(id.len(), 64);
        assert!(!id.contains("secret"));
        assert!(s.object_path("secret-pdk.lay").exists());
        let other = EncryptedStore::open(tmp.path(), [8u8; 32]).unwrap();
        assert_ne!(other.alias("secret-pdk.lay"), id);
    }

    #[test]
    fn every_byte_flip_is_detected() {
        let tmp = tempfile::tempdir().unwrap();
        let s = EncryptedStore::with_chunk_size(tmp.path(), key(), 4096).unwrap();
        let d = blob(9000, 3);
        s.put("o", &d).unwrap();
        let path = s.object_path("o");
        let orig = fs::read(&path).unwrap();
        for pos in (0..orig.len()).step_by(97).chain([orig.len() - 1]) {
            let mut t = orig.clone();
            t[pos] ^= 0x01;
            fs::write(&path, &t).unwrap();
            assert!(s.get("o").is_err(), "flip at {pos} undetected");
        }
        fs::write(&path, &orig).unwrap();
        assert_eq!(s.get("o").unwrap(), d);
    }

    #[test]
    fn chunk_swap_and_truncation_are_detected() {
        let tmp = tempfile::tempdir().unwrap();
        let s = EncryptedStore::with_chunk_size(tmp.path(), key(), 4096).unwrap();
        s.put("o", &blob(3 * 4096, 5)).unwrap();
        let path = s.object_path("o");
        let orig = fs::read(&path).unwrap();
        let full = 4096 + TAG;
        let body = orig.len() - 3 * full;
        let mut swapped = orig.clone();
        swapped[body..body + full].copy_from_slice(&orig[body + full..body + 2 * full]);
        swapped[body + full..body + 2 * full].copy_from_slice(&orig[body..body + full]);
        fs::write(&path, &swapped).unwrap();
        assert!(matches!(s.get("o"), Err(StoreError::ChunkAuth(0))));
        fs::write(&path, &orig[..orig.len() - full]).unwrap();
        assert!(matches!(
            s.get("o"),
            Err(StoreError::Truncated { expected: 12288, found: 8192 })
        ));
    }

    #[test]
    fn renamed_object_file_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let s = EncryptedStore::open(tmp.path(), key()).unwrap();
        s.put("a", b"alpha").unwrap();
        s.put("b", b"beta").unwrap();
        fs::copy(s.object_path("a"), s.object_path("b")).unwrap();
        assert!(matches!(s.get("b"), Err(StoreError::NameMismatch)));
    }

    #[test]
    fn wrong_master_key_reads_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        EncryptedStore::open(tmp.path(), key()).unwrap().put("o", b"data").unwrap();
        let other = EncryptedStore::open(tmp.path(), [9u8; 32]).unwrap();
        assert!(other.get("o").is_err());
        assert!(other.list().is_err());
    }

    #[test]
    fn seal_round_trip_and_rejections() {
        let k = key();
        let s = seal_key_with(&k, "sev-snp-demo", [1; 16], [2; 12]).unwrap();
        assert_eq!(s, seal_key_with(&k, "sev-snp-demo", [1; 16], [2; 12]).unwrap());
        assert_eq!(unseal_key(&s, "sev-snp-demo").unwrap(), k);
        assert!(matches!(unseal_key(&s, "wrong"), Err(StoreError::Measurement)));
        let bytes = s.to_bytes();
        assert_eq!(SealedKey::from_bytes(&bytes).unwrap(), s);
        for pos in 6..bytes.len() {
            let mut t = bytes.clone();
            t[pos] ^= 0x80;
            let r = SealedKey::from_bytes(&t).and_then(|sk| unseal_key(&sk, "sev-snp-demo"));
            assert!(matches!(r, Err(StoreError::SealedAuth)), "flip at {pos}: {r:?}");
        }
        assert!(seal_key(&k, "").is_err());
    }

    #[test]
    fn plain_store_keeps_exact_bytes() {
        let tmp = tempfile::tempdir().unwrap();
        let s = PlainStore::open(tmp.path()).unwrap();
        s.put("x.lay", b"LAYOUTv1\n").unwrap();
        assert_eq!(fs::read(s.object_path("x.lay")).unwrap(), b"LAYOUTv1\n");
        assert_eq!(s.list().unwrap(), vec!["x.lay".to_string()]);
    }

    #[test]
    fn daemon_round_trip_in_both_modes() {
        let tmp = tempfile::tempdir().unwrap();
        let plain = store_serve("127.0.0.1:0", tmp.path(), StoreMode::SidecarPlain, None).unwrap();
        let c = StoreClient::new(plain.addr()).unwrap();
        assert!(c.ready());
        let d = blob(100_000, 1);
        c.put("p", &d).unwrap();
        assert_eq!(c.get("p").unwrap(), d);
        assert_eq!(fs::read(tmp.path().join("objects/p")).unwrap(), d);
        plain.shutdown();

        let tmp = tempfile::tempdir().unwrap();
        write_sealed(tmp.path(), &seal_key(&key(), "m1").unwrap()).unwrap();
        let enc = store_serve("127.0.0.1:0", tmp.path(), StoreMode::SidecarEncrypted, Some("m1")).unwrap();
        assert!(enc.locked().is_none());
        let c = StoreClient::new(enc.addr()).unwrap();
        c.put("e", &d).unwrap();
        assert_eq!(c.get("e").unwrap(), d);
        assert_eq!(c.list().unwrap(), vec!["e".to_string()]);
        assert!(matches!(c.get("nope"), Err(StoreError::Remote(_))));
        let local = EncryptedStore::open(tmp.path(), key()).unwrap();
        assert_eq!(local.get("e").unwrap(), d);
    }

    #[test]
    fn daemon_with_wrong_measurement_is_locked() {
        let tmp = tempfile::tempdir().unwrap();
        let local = EncryptedStore::open(tmp.path(), key()).unwrap();
        local.put("e", b"secret").unwrap();
        write_sealed(tmp.path(), &seal_key(&key(), "right").unwrap()).unwrap();
        let d = store_serve("127.0.0.1:0", tmp.path(), StoreMode::SidecarEncrypted, Some("wrong")).unwrap();
        assert!(d.locked().is_some());
        let c = StoreClient::new(d.addr()).unwrap();
        assert!(!c.ready());
        match c.get("e") {
            Err(StoreError::Remote(m)) => assert!(m.contains("locked") && !m.contains("secret")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mode_names_parse() {
        for m in [StoreMode::Passthrough, StoreMode::SidecarPlain, StoreMode::SidecarEncrypted] {
            assert_eq!(m.to_string().parse::<StoreMode>().unwrap(), m);
        }
        assert!("enc".parse::<StoreMode>().is_err());
    }
}
