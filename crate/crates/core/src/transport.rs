// SPDX-License-Identifier: Apache-2.0

//! Byte channels under the cluster protocol.
//!
//! `Plain` is a raw TCP stream. `Mutual` is TLS with client authentication
//! where both ends present a certificate issued by the workload's own trust
//! anchor; a member's identity travels in a URI SAN of the form
//! `opcvault://<workload>/<role>/<member>`.
//!
//! Credential bundles are directories holding `anchor.pem` (the anchor
//! certificate) and `member-<k>.key` / `member-<k>.crt` (PKCS#8 Ed25519 key
//! and certificate, PEM). Member 0 is the primary, all others are workers.
//! Keys are derived from a seed, so the same inputs always yield the same
//! files.

use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rcgen::{
    BasicConstraints, CertificateParams, DistinguishedName, DnType, IsCa, KeyPair, KeyUsagePurpose,
    SanType, SerialNumber,
};
use rustls::pki_types::pem::PemObject;
use rustls::pki_types::{CertificateDer, PrivateKeyDer, PrivatePkcs8KeyDer, ServerName, UnixTime};
use rustls::server::WebPkiClientVerifier;
use rustls::{ClientConfig, ClientConnection, RootCertStore, ServerConfig, ServerConnection, StreamOwned};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("tls: {0}")]
    Tls(#[from] rustls::Error),
    #[error("certificate issuance: {0}")]
    Issue(#[from] rcgen::Error),
    #[error("credential file {path}: {reason}")]
    Credential { path: PathBuf, reason: String },
    #[error("refusing to overwrite existing {0}")]
    Exists(PathBuf),
    #[error("invalid workload id {0:?} (use 1-63 of [a-z0-9-])")]
    WorkloadId(String),
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("peer identity rejected: {0}")]
    Identity(String),
    #[error("mutual mode needs credentials")]
    NoCredentials,
}

type Result<T> = std::result::Result<T, TransportError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SecurityMode {
    Plain,
    Mutual,
}

impl FromStr for SecurityMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "plain" => Ok(Self::Plain),
            "mutual" => Ok(Self::Mutual),
            _ => Err(format!("unknown security mode {s:?} (plain, mutual)")),
        }
    }
}

impl fmt::Display for SecurityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Plain => "plain",
            Self::Mutual => "mutual",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Primary,
    Worker,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Primary => "primary",
            Role::Worker => "worker",
        }
    }

    fn of_member(k: u32) -> Role {
        if k == 0 {
            Role::Primary
        } else {
            Role::Worker
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerIdentity {
    pub workload_id: String,
    pub role: Role,
    pub member: u32,
}

/// A member's identity as loaded from a credential bundle.
#[derive(Debug)]
pub struct Credentials {
    pub identity: PeerIdentity,
    anchor: CertificateDer<'static>,
    cert: CertificateDer<'static>,
    key: PrivatePkcs8KeyDer<'static>,
}

impl Clone for Credentials {
    fn clone(&self) -> Self {
        Self {
            identity: self.identity.clone(),
            anchor: self.anchor.clone(),
            cert: self.cert.clone(),
            key: self.key.clone_key(),
        }
    }
}

const URI_SCHEME: &str = "opcvault://";
// PKCS#8 v1 wrapper for a raw Ed25519 seed
const ED25519_PKCS8_PREFIX: [u8; 16] = [
    0x30, 0x2e, 0x02, 0x01, 0x00, 0x30, 0x05, 0x06, 0x03, 0x2b, 0x65, 0x70, 0x04, 0x22, 0x04, 0x20,
];

fn valid_workload(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 63
        && id.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

fn dns_name(role: Role, workload: &str) -> String {
    format!("{}.{workload}.opcvault.internal", role.as_str())
}

fn derived_key(label: &str, workload: &str, seed: &[u8]) -> Result<KeyPair> {
    let mut h = Sha256::new();
    for part in [label.as_bytes(), workload.as_bytes(), seed] {
        h.update((part.len() as u64).to_be_bytes());
        h.update(part);
    }
    let mut der = ED25519_PKCS8_PREFIX.to_vec();
    der.extend_from_slice(&h.finalize());
    let pkcs8 = PrivatePkcs8KeyDer::from(der);
    Ok(KeyPair::from_pkcs8_der_and_sign_algo(&pkcs8, &rcgen::PKCS_ED25519)?)
}

fn base_params(cn: &str, serial: u64) -> CertificateParams {
    let mut p = CertificateParams::default();
    let mut dn = DistinguishedName::new();
    dn.push(DnType::CommonName, cn);
    p.distinguished_name = dn;
    p.not_before = rcgen::date_time_ymd(2024, 1, 1);
    p.not_after = rcgen::date_time_ymd(2099, 12, 31);
    p.serial_number = Some(SerialNumber::from(serial));
    p
}

fn write_new(path: &Path, data: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| match e.kind() {
            io::ErrorKind::AlreadyExists => TransportError::Exists(path.to_path_buf()),
            _ => e.into(),
        })?;
    f.write_all(data.as_bytes())?;
    Ok(())
}

/// Issues a trust anchor and `n_members` identities into `dir`, which must
/// not exist yet. Returns the member path prefixes (`dir/member-<k>`).
pub fn gen_workload_credentials(
    dir: &Path,
    workload_id: &str,
    n_members: u32,
    seed: &[u8],
) -> Result<Vec<PathBuf>> {
    if !valid_workload(workload_id) {
        return Err(TransportError::WorkloadId(workload_id.to_string()));
    }
    if dir.exists() {
        return Err(TransportError::Exists(dir.to_path_buf()));
    }
    let anchor_key = derived_key("anchor", workload_id, seed)?;
    let mut ap = base_params(&format!("{workload_id} workload anchor"), 1);
    ap.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
    ap.key_usages = vec![KeyUsagePurpose::KeyCertSign, KeyUsagePurpose::DigitalSignature];
    let anchor = ap.self_signed(&anchor_key)?;

    fs::create_dir_all(dir)?;
    write_new(&dir.join("anchor.pem"), &anchor.pem())?;
    let mut prefixes = Vec::new();
    for k in 0..n_members {
        let role = Role::of_member(k);
        let key = derived_key(&format!("member-{k}"), workload_id, seed)?;
        let mut p = base_params(&format!("{} {k} of {workload_id}", role.as_str()), 2 + k as u64);
        p.subject_alt_names = vec![
            SanType::DnsName(dns_name(role, workload_id).try_into()?),
            SanType::URI(format!("{URI_SCHEME}{workload_id}/{}/{k}", role.as_str()).try_into()?),
        ];
        p.key_usages = vec![KeyUsagePurpose::DigitalSignature];
        p.extended_key_usages = vec![
            rcgen::ExtendedKeyUsagePurpose::ServerAuth,
            rcgen::ExtendedKeyUsagePurpose::ClientAuth,
        ];
        let cert = p.signed_by(&key, &anchor, &anchor_key)?;
        let prefix = dir.join(format!("member-{k}"));
        write_new(&prefix.with_extension("key"), &key.serialize_pem())?;
        write_new(&prefix.with_extension("crt"), &cert.pem())?;
        prefixes.push(prefix);
    }
    Ok(prefixes)
}

/// Identity named by a certificate's `opcvault://` URI SAN.
pub fn identity_of(cert: &CertificateDer<'_>) -> Result<PeerIdentity> {
    let bad = |m: &str| TransportError::Identity(m.to_string());
    let (_, x) = x509_parser::parse_x509_certificate(cert.as_ref()).map_err(|_| bad("unparsable certificate"))?;
    let san = x
        .subject_alternative_name()
        .map_err(|_| bad("malformed subjectAltName"))?
        .ok_or_else(|| bad("no subjectAltName"))?;
    for name in &san.value.general_names {
        if let x509_parser::extensions::GeneralName::URI(uri) = name {
            let Some(rest) = uri.strip_prefix(URI_SCHEME) else { continue };
            let parts: Vec<&str> = rest.split('/').collect();
            if let [w, r, k] = parts[..] {
                let role = match r {
                    "primary" => Role::Primary,
                    "worker" => Role::Worker,
                    _ => return Err(bad("unknown role")),
                };
                let member = k.parse().map_err(|_| bad("bad member index"))?;
                if !valid_workload(w) {
                    return Err(bad("bad workload id"));
                }
                return Ok(PeerIdentity {
                    workload_id: w.to_string(),
                    role,
                    member,
                });
            }
        }
    }
    Err(bad("no workload identity URI"))
}

fn roots(anchor: &CertificateDer<'static>) -> Result<Arc<RootCertStore>> {
    let mut store = RootCertStore::empty();
    store.add(anchor.clone())?;
    Ok(Arc::new(store))
}

fn provider() -> Arc<rustls::crypto::CryptoProvider> {
    Arc::new(rustls::crypto::ring::default_provider())
}

/// Checks that `cert` chains to `anchor` and returns the identity it names.
pub fn verify_member(cert: &CertificateDer<'static>, anchor: &CertificateDer<'static>) -> Result<PeerIdentity> {
    let verifier = WebPkiClientVerifier::builder_with_provider(roots(anchor)?, provider())
        .build()
        .map_err(|e| TransportError::Identity(e.to_string()))?;
    verifier.verify_client_cert(cert, &[], UnixTime::now())?;
    identity_of(cert)
}

fn read_pem_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| TransportError::Credential {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Loads the member whose files are `<prefix>.key` / `<prefix>.crt`, with
/// `anchor.pem` beside them.
pub fn load_credentials(prefix: &Path) -> Result<Credentials> {
    let cred_err = |path: &Path, reason: String| TransportError::Credential {
        path: path.to_path_buf(),
        reason,
    };
    let anchor_path = prefix.parent().unwrap_or(Path::new(".")).join("anchor.pem");
    let cert_path = prefix.with_extension("crt");
    let key_path = prefix.with_extension("key");
    let anchor = CertificateDer::from_pem_slice(&read_pem_file(&anchor_path)?)
        .map_err(|e| cred_err(&anchor_path, e.to_string()))?;
    let cert = CertificateDer::from_pem_slice(&read_pem_file(&cert_path)?)
        .map_err(|e| cred_err(&cert_path, e.to_string()))?;
    let key = PrivatePkcs8KeyDer::from_pem_slice(&read_pem_file(&key_path)?)
        .map_err(|e| cred_err(&key_path, e.to_string()))?;
    let identity = verify_member(&cert, &anchor)?;
    Ok(Credentials {
        identity,
        anchor,
        cert,
        key,
    })
}

/// Shared buffer receiving a copy of every byte crossing the socket.
pub type WireSink = Arc<Mutex<Vec<u8>>>;

/// A stream that copies raw traffic in both directions into a sink.
#[derive(Debug)]
pub struct Tapped<S> {
    inner: S,
    sink: Option<WireSink>,
}

impl<S> Tapped<S> {
    pub fn new(inner: S, sink: Option<WireSink>) -> Self {
        Self { inner, sink }
    }

    pub fn get_ref(&self) -> &S {
        &self.inner
    }
}

impl<S: Read> Read for Tapped<S> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        if let Some(s) = &self.sink {
            s.lock().expect("tap sink poisoned").extend_from_slice(&buf[..n]);
        }
        Ok(n)
    }
}

impl<S: Write> Write for Tapped<S> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        if let Some(s) = &self.sink {
            s.lock().expect("tap sink poisoned").extend_from_slice(&buf[..n]);
        }
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

enum Kind {
    Plain(Tapped<TcpStream>),
    Server(Box<StreamOwned<ServerConnection, Tapped<TcpStream>>>),
    Client(Box<StreamOwned<ClientConnection, Tapped<TcpStream>>>),
}

/// An established, ordered byte stream to one peer.
pub struct Channel {
    kind: Kind,
    peer: Option<PeerIdentity>,
}

impl fmt::Debug for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Channel").field("peer", &self.peer).finish_non_exhaustive()
    }
}

impl Channel {
    /// Verified identity of the other end (mutual mode only).
    pub fn peer(&self) -> Option<&PeerIdentity> {
        self.peer.as_ref()
    }

    fn tcp(&self) -> &TcpStream {
        match &self.kind {
            Kind::Plain(s) => s.get_ref(),
            Kind::Server(s) => s.sock.get_ref(),
            Kind::Client(s) => s.sock.get_ref(),
        }
    }

    pub fn set_read_timeout(&self, t: Option<Duration>) -> io::Result<()> {
        self.tcp().set_read_timeout(t)
    }

    pub fn peer_addr(&self) -> io::Result<SocketAddr> {
        self.tcp().peer_addr()
    }

    /// Closes both directions; pending reads on other handles fail.
    pub fn shutdown(&self) {
        let _ = self.tcp().shutdown(std::net::Shutdown::Both);
    }

    pub fn try_clone_tcp(&self) -> io::Result<TcpStream> {
        self.tcp().try_clone()
    }
}

impl Read for Channel {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match &mut self.kind {
            Kind::Plain(s) => s.read(buf),
            Kind::Server(s) => s.read(buf),
            Kind::Client(s) => s.read(buf),
        }
    }
}

impl Write for Channel {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match &mut self.kind {
            Kind::Plain(s) => s.write(buf),
            Kind::Server(s) => s.write(buf),
            Kind::Client(s) => s.write(buf),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match &mut self.kind {
            Kind::Plain(s) => s.flush(),
            Kind::Server(s) => s.flush(),
            Kind::Client(s) => s.flush(),
        }
    }
}

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(30);

fn expect_peer(conn_certs: Option<&[CertificateDer<'static>]>, workload: &str, role: Role) -> Result<PeerIdentity> {
    let cert = conn_certs
        .and_then(|c| c.first())
        .ok_or_else(|| TransportError::Identity("peer presented no certificate".into()))?;
    let id = identity_of(cert)?;
    if id.workload_id != workload {
        return Err(TransportError::Identity(format!(
            "peer belongs to workload {:?}, expected {workload:?}",
            id.workload_id
        )));
    }
    if id.role != role {
        return Err(TransportError::Identity(format!(
            "peer role {}, expected {}",
            id.role.as_str(),
            role.as_str()
        )));
    }
    Ok(id)
}

/// Server half: turns accepted TCP streams into channels.
#[derive(Clone)]
pub struct Acceptor {
    mode: SecurityMode,
    tls: Option<(Arc<ServerConfig>, String)>,
}

impl fmt::Debug for Acceptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Acceptor").field("mode", &self.mode).finish_non_exhaustive()
    }
}

impl Acceptor {
    pub fn new(mode: SecurityMode, creds: Option<&Credentials>) -> Result<Self> {
        let tls = match mode {
            SecurityMode::Plain => None,
            SecurityMode::Mutual => {
                let c = creds.ok_or(TransportError::NoCredentials)?;
                let verifier = WebPkiClientVerifier::builder_with_provider(roots(&c.anchor)?, provider())
                    .build()
                    .map_err(|e| TransportError::Handshake(e.to_string()))?;
                let config = ServerConfig::builder_with_provider(provider())
                    .with_safe_default_protocol_versions()?
                    .with_client_cert_verifier(verifier)
                    .with_single_cert(vec![c.cert.clone()], PrivateKeyDer::Pkcs8(c.key.clone_key()))?;
                Some((Arc::new(config), c.identity.workload_id.clone()))
            }
        };
        Ok(Self { mode, tls })
    }

    pub fn mode(&self) -> SecurityMode {
        self.mode
    }

    /// Completes the handshake on `stream` and checks the peer is a worker
    /// of the same workload.
    pub fn establish(&self, stream: TcpStream, tap: Option<WireSink>) -> Result<Channel> {
        stream.set_nodelay(true)?;
        let Some((config, workload)) = &self.tls else {
            return Ok(Channel {
                kind: Kind::Plain(Tapped::new(stream, tap)),
                peer: None,
            });
        };
        stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
        let mut conn = ServerConnection::new(config.clone())?;
        let mut sock = Tapped::new(stream, tap);
        while conn.is_handshaking() {
            conn.complete_io(&mut sock)
                .map_err(|e| TransportError::Handshake(e.to_string()))?;
        }
        let peer = expect_peer(conn.peer_certificates(), workload, Role::Worker)?;
        sock.get_ref().set_read_timeout(None)?;
        Ok(Channel {
            kind: Kind::Server(Box::new(StreamOwned::new(conn, sock))),
            peer: Some(peer),
        })
    }
}

/// A bound listening socket plus its acceptor.
#[derive(Debug)]
pub struct Listener {
    pub tcp: TcpListener,
    pub acceptor: Acceptor,
}

pub fn listen(addr: impl ToSocketAddrs, mode: SecurityMode, creds: Option<&Credentials>) -> Result<Listener> {
    let acceptor = Acceptor::new(mode, creds)?;
    Ok(Listener {
        tcp: TcpListener::bind(addr)?,
        acceptor,
    })
}

/// Connects to a primary and, in mutual mode, completes the handshake
/// before returning.
pub fn connect(
    addr: impl ToSocketAddrs,
    mode: SecurityMode,
    creds: Option<&Credentials>,
    tap: Option<WireSink>,
) -> Result<Channel> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    match mode {
        SecurityMode::Plain => Ok(Channel {
            kind: Kind::Plain(Tapped::new(stream, tap)),
            peer: None,
        }),
        SecurityMode::Mutual => {
            let c = creds.ok_or(TransportError::NoCredentials)?;
            let workload = c.identity.workload_id.clone();
            let config = ClientConfig::builder_with_provider(provider())
                .with_safe_default_protocol_versions()?
                .with_root_certificates(roots(&c.anchor)?)
                .with_client_auth_cert(vec![c.cert.clone()], PrivateKeyDer::Pkcs8(c.key.clone_key()))?;
            let name = ServerName::try_from(dns_name(Role::Primary, &workload))
                .map_err(|e| TransportError::Handshake(e.to_string()))?;
            stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
            let mut conn = ClientConnection::new(Arc::new(config), name)?;
            let mut sock = Tapped::new(stream, tap);
            while conn.is_handshaking() {
                conn.complete_io(&mut sock)
                    .map_err(|e| TransportError::Handshake(e.to_string()))?;
            }
            let peer = expect_peer(conn.peer_certificates(), &workload, Role::Primary)?;
            sock.get_ref().set_read_timeout(None)?;
            Ok(Channel {
                kind: Kind::Client(Box::new(StreamOwned::new(conn, sock))),
                peer: Some(peer),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    fn bundle(workload: &str, n: u32, seed: &[u8]) -> (tempfile::TempDir, Vec<PathBuf>) {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("creds");
        let p = gen_workload_credentials(&dir, workload, n, seed).unwrap();
        (tmp, p)
    }

    #[test]
    fn issued_members_verify_against_their_anchor() {
        let (_t, p) = bundle("fab-a", 2, b"seed");
        let primary = load_credentials(&p[0]).unwrap();
        let worker = load_credentials(&p[1]).unwrap();
        assert_eq!(primary.identity.role, Role::Primary);
        assert_eq!(worker.identity, PeerIdentity {
            workload_id: "fab-a".into(),
            role: Role::Worker,
            member: 1,
        });
    }

    #[test]
    fn cross_workload_identity_fails() {
        let (_ta, a) = bundle("fab-a", 2, b"seed");
        let (_tb, b) = bundle("fab-b", 2, b"seed");
        let ca = load_credentials(&a[1]).unwrap();
        let cb = load_credentials(&b[1]).unwrap();
        assert!(verify_member(&ca.cert, &cb.anchor).is_err());
        assert!(verify_member(&ca.cert, &ca.anchor).is_ok());
    }

    #[test]
    fn issuance_is_deterministic_and_refuses_overwrite() {
        let (ta, a) = bundle("fab-a", 1, b"seed");
        let (_tb, b) = bundle("fab-a", 1, b"seed");
        for ext in ["key", "crt"] {
            assert_eq!(
                fs::read(a[0].with_extension(ext)).unwrap(),
                fs::read(b[0].with_extension(ext)).unwrap()
            );
        }
        let dir = ta.path().join("creds");
        assert!(matches!(
            gen_workload_credentials(&dir, "fab-a", 1, b"seed"),
            Err(TransportError::Exists(_))
        ));
    }

    #[test]
    fn zero_members_is_anchor_only() {
        let (t, p) = bundle("fab-a", 0, b"x");
        assert!(p.is_empty());
        let names: Vec<_> = fs::read_dir(t.path().join("creds"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(names, vec!["anchor.pem".to_string()]);
    }

    #[test]
    fn bad_workload_ids_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        for w in ["", "Fab", "a/b", "a.b"] {
            assert!(matches!(
                gen_workload_credentials(&tmp.path().join("x"), w, 1, b""),
                Err(TransportError::WorkloadId(_))
            ));
        }
    }

    fn echo_pair(server: Option<Credentials>, client: Option<Credentials>, mode: SecurityMode) -> Result<(Channel, PeerIdentity)> {
        let l = listen("127.0.0.1:0", mode, server.as_ref())?;
        let addr = l.tcp.local_addr()?;
        let acceptor = l.acceptor.clone();
        let h = thread::spawn(move || -> Result<Option<PeerIdentity>> {
            let (s, _) = l.tcp.accept()?;
            let mut ch = acceptor.establish(s, None)?;
            let mut buf = [0u8; 5];
            ch.read_exact(&mut buf)?;
            ch.write_all(&buf)?;
            ch.flush()?;
            Ok(ch.peer().cloned())
        });
        let mut c = connect(addr, mode, client.as_ref(), None)?;
        c.write_all(b"hello")?;
        c.flush()?;
        let mut buf = [0u8; 5];
        c.read_exact(&mut buf)?;
        assert_eq!(&buf, b"hello");
        let seen = h.join().unwrap()?;
        let peer = c.peer().cloned();
        assert_eq!(seen.is_some(), peer.is_some());
        Ok((c, seen.unwrap_or(PeerIdentity {
            workload_id: String::new(),
            role: Role::Worker,
            member: 0,
        })))
    }

    #[test]
    fn plain_and_mutual_channels_carry_bytes() {
        echo_pair(None, None, SecurityMode::Plain).unwrap();
        let (_t, p) = bundle("fab-a", 2, b"seed");
        let (c, seen) = echo_pair(
            Some(load_credentials(&p[0]).unwrap()),
            Some(load_credentials(&p[1]).unwrap()),
            SecurityMode::Mutual,
        )
        .unwrap();
        assert_eq!(c.peer().unwrap().workload_id, "fab-a");
        assert_eq!(c.peer().unwrap().role, Role::Primary);
        assert_eq!(seen.member, 1);
    }

    #[test]
    fn foreign_workload_is_rejected_in_handshake() {
        let (_ta, a) = bundle("fab-a", 2, b"seed");
        let (_tb, b) = bundle("fab-b", 2, b"seed");
        let server = load_credentials(&a[0]).unwrap();
        let l = listen("127.0.0.1:0", SecurityMode::Mutual, Some(&server)).unwrap();
        let addr = l.tcp.local_addr().unwrap();
        let h = thread::spawn(move || {
            let (s, _) = l.tcp.accept().unwrap();
            l.acceptor.establish(s, None).map(|_| ())
        });
        let r = connect(addr, SecurityMode::Mutual, Some(&load_credentials(&b[1]).unwrap()), None);
        assert!(r.is_err());
        assert!(h.join().unwrap().is_err());
    }

    #[test]
    fn worker_identity_cannot_act_as_primary() {
        let (_t, p) = bundle("fab-a", 3, b"seed");
        let impostor = load_credentials(&p[2]).unwrap();
        let l = listen("127.0.0.1:0", SecurityMode::Mutual, Some(&impostor)).unwrap();
        let addr = l.tcp.local_addr().unwrap();
        let h = thread::spawn(move || {
            let (s, _) = l.tcp.accept().unwrap();
            let _ = l.acceptor.establish(s, None);
        });
        assert!(connect(addr, SecurityMode::Mutual, Some(&load_credentials(&p[1]).unwrap()), None).is_err());
        h.join().unwrap();
    }
}
