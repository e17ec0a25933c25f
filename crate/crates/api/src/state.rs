//! Shared service state: the session, credentials and change notification.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::http::HeaderMap;
use ces_chain::ledger::{export_blocks, DEFAULT_SEGMENT_BLOCKS};
use ces_chain::tx::Role;
use ces_chain::{Hash32, KeyPair, OPERATOR};
use ces_market::MarketSession;
use serde::Serialize;
use tokio::sync::watch;

use crate::error::{ApiError, ApiResult, ErrorCode};

/// What a participant receives on enrollment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Credential {
    pub participant: String,
    pub role: Role,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bus: Option<usize>,
    /// Hex-encoded Ed25519 public key recorded on the ledger.
    pub public_key: String,
    /// Bearer token for every authenticated call.
    pub token: String,
}

/// Bearer token bound to a keypair: the hash of the key's signature over a
/// fixed label. Only the key holder can produce it.
pub fn token_for(key: &KeyPair) -> String {
    Hash32::digest_parts(&[b"ces-api-token", &key.sign(b"ces-api-token")]).to_hex()
}

/// Who is calling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Caller {
    pub party: String,
}

impl Caller {
    pub fn is_operator(&self) -> bool {
        self.party == OPERATOR
    }

    pub fn require_operator(&self) -> ApiResult<()> {
        if self.is_operator() {
            Ok(())
        } else {
            Err(ApiError::operator_only())
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServiceOptions {
    /// Directory the service mirrors the chain into, as segment files,
    /// whenever blocks are added; the verification endpoint re-checks it.
    pub ledger_dir: Option<PathBuf>,
}

#[derive(Debug)]
struct Inner {
    session: Mutex<MarketSession>,
    credentials: Mutex<BTreeMap<String, Credential>>,
    tokens: Mutex<BTreeMap<String, String>>,
    changes: watch::Sender<u64>,
    operator_token: String,
    options: ServiceOptions,
    /// Blocks already mirrored into `options.ledger_dir`.
    exported: AtomicUsize,
}

/// Cheaply clonable handle shared by every request.
#[derive(Debug, Clone)]
pub struct ApiState {
    inner: Arc<Inner>,
}

impl ApiState {
    pub fn new(session: MarketSession, options: ServiceOptions) -> Self {
        let operator_token = session.key(OPERATOR).map(token_for).expect("sessions enroll the operator");
        let (changes, _) = watch::channel(session.last_event_id());
        let mut tokens = BTreeMap::new();
        tokens.insert(operator_token.clone(), OPERATOR.to_string());
        let state = Self {
            inner: Arc::new(Inner {
                session: Mutex::new(session),
                credentials: Mutex::new(BTreeMap::new()),
                tokens: Mutex::new(tokens),
                changes,
                operator_token,
                options,
                exported: AtomicUsize::new(0),
            }),
        };
        state.mirror(&state.session());
        state
    }

    /// Rewrites the segment files when the chain has grown since the last
    /// export. Failures are logged; the in-memory chain stays authoritative.
    fn mirror(&self, session: &MarketSession) {
        let Some(dir) = &self.inner.options.ledger_dir else { return };
        let blocks = session.ledger().blocks();
        if self.inner.exported.load(Ordering::Relaxed) == blocks.len() {
            return;
        }
        match export_blocks(blocks, dir, DEFAULT_SEGMENT_BLOCKS) {
            Ok(_) => self.inner.exported.store(blocks.len(), Ordering::Relaxed),
            Err(e) => log::error!("exporting the ledger to {}: {e}", dir.display()),
        }
    }

    pub fn operator_token(&self) -> &str {
        &self.inner.operator_token
    }

    pub fn options(&self) -> &ServiceOptions {
        &self.inner.options
    }

    /// Locks the session. Poisoning is ignored: every session call leaves
    /// the session consistent or reports an error before mutating.
    pub fn session(&self) -> MutexGuard<'_, MarketSession> {
        self.inner.session.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Runs `f` on the session and wakes event streams if it logged events.
    pub fn with_session<T>(&self, f: impl FnOnce(&mut MarketSession) -> T) -> T {
        let mut session = self.session();
        let out = f(&mut session);
        self.mirror(&session);
        let last = session.last_event_id();
        drop(session);
        self.inner.changes.send_if_modified(|v| {
            let changed = *v != last;
            *v = last;
            changed
        });
        out
    }

    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.inner.changes.subscribe()
    }

    pub fn credential(&self, participant: &str) -> Option<Credential> {
        self.inner.credentials.lock().unwrap_or_else(|p| p.into_inner()).get(participant).cloned()
    }

    /// Registers a credential; fails if the participant already holds one.
    pub fn register(&self, credential: Credential) -> ApiResult<()> {
        let mut creds = self.inner.credentials.lock().unwrap_or_else(|p| p.into_inner());
        if creds.contains_key(&credential.participant) {
            return Err(ApiError::new(
                ErrorCode::AlreadyEnrolled,
                format!("{} is already enrolled", credential.participant),
            ));
        }
        self.inner
            .tokens
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .insert(credential.token.clone(), credential.participant.clone());
        creds.insert(credential.participant.clone(), credential);
        Ok(())
    }

    /// Resolves a bearer token from the `Authorization` header or, for
    /// event-stream clients that cannot set headers, a `token` query value.
    pub fn authenticate(&self, headers: &HeaderMap, query_token: Option<&str>) -> ApiResult<Caller> {
        let header = headers
            .get(axum::http::header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        let token = header.or(query_token).ok_or_else(ApiError::auth)?;
        let tokens = self.inner.tokens.lock().unwrap_or_else(|p| p.into_inner());
        tokens
            .get(token.trim())
            .map(|party| Caller { party: party.clone() })
            .ok_or_else(ApiError::auth)
    }
}
