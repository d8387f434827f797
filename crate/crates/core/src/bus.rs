//! In-process publish/subscribe broker with MQTT topic-filter semantics.
//!
//! Every subscription owns one delivery thread, so handlers for a single
//! subscription never run concurrently and see events in publish order.
//! Failed deliveries are retried with exponential backoff and end up in the
//! dead-letter log once the attempt budget is spent.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Weak};
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use uuid::Uuid;

use crate::clock::{Clock, SystemClock, Timestamp};
use crate::model::Identifier;

pub const MAX_TOPIC_LEVELS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BusError {
    #[error("malformed topic filter {0:?}: {1}")]
    MalformedPattern(String, &'static str),
    #[error("invalid topic {0:?}: {1}")]
    InvalidTopic(String, &'static str),
    #[error("bus closed")]
    BusClosed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum FilterLevel {
    Exact(String),
    SingleWildcard,
    MultiWildcard,
}

/// Parsed subscription pattern (`+` matches one level, trailing `#` any rest).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicFilter {
    raw: String,
    levels: Vec<FilterLevel>,
}

impl TopicFilter {
    pub fn parse(pattern: &str) -> Result<Self, BusError> {
        if pattern.is_empty() {
            return Err(BusError::MalformedPattern(pattern.into(), "empty"));
        }
        let parts: Vec<&str> = pattern.split('/').collect();
        if parts.len() > MAX_TOPIC_LEVELS {
            return Err(BusError::MalformedPattern(pattern.into(), "too many levels"));
        }
        let mut levels = Vec::with_capacity(parts.len());
        for (i, part) in parts.iter().enumerate() {
            let level = match *part {
                "#" if i + 1 == parts.len() => FilterLevel::MultiWildcard,
                "#" => return Err(BusError::MalformedPattern(pattern.into(), "'#' must be the final level")),
                "+" => FilterLevel::SingleWildcard,
                p if p.contains(['+', '#']) => {
                    return Err(BusError::MalformedPattern(pattern.into(), "wildcards must occupy a whole level"))
                }
                p => FilterLevel::Exact(p.to_string()),
            };
            levels.push(level);
        }
        Ok(TopicFilter {
            raw: pattern.into(),
            levels,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    pub fn matches(&self, topic: &str) -> bool {
        let mut topic_levels = topic.split('/');
        for level in &self.levels {
            match level {
                FilterLevel::MultiWildcard => return true,
                FilterLevel::SingleWildcard => {
                    if topic_levels.next().is_none() {
                        return false;
                    }
                }
                FilterLevel::Exact(name) => match topic_levels.next() {
                    Some(t) if t == name => {}
                    _ => return false,
                },
            }
        }
        topic_levels.next().is_none()
    }
}

pub fn validate_topic(topic: &str) -> Result<(), BusError> {
    if topic.is_empty() {
        return Err(BusError::InvalidTopic(topic.into(), "empty"));
    }
    if topic.contains(['+', '#']) {
        return Err(BusError::InvalidTopic(topic.into(), "wildcards are not allowed in topics"));
    }
    if topic.split('/').count() > MAX_TOPIC_LEVELS {
        return Err(BusError::InvalidTopic(topic.into(), "too many levels"));
    }
    Ok(())
}

pub fn match_topic(pattern: &str, topic: &str) -> Result<bool, BusError> {
    let filter = TopicFilter::parse(pattern)?;
    validate_topic(topic)?;
    Ok(filter.matches(topic))
}

/// Topic names used by the federation.
pub mod topics {
    use super::Action;
    use crate::model::Identifier;

    pub fn shell(org: &str, id: &Identifier, action: Action) -> String {
        format!("aas-repo/{org}/shells/{}/{}", id.to_path(), action.as_str())
    }

    pub fn submodel(org: &str, id: &Identifier, action: Action) -> String {
        format!("sm-repo/{org}/submodels/{}/{}", id.to_path(), action.as_str())
    }

    pub fn workflow(org: &str, process_key: &str, instance_id: &str, signal: &str) -> String {
        format!("workflow/{org}/{process_key}/{instance_id}/{signal}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    Created,
    Updated,
    Deleted,
    WorkflowSignal,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Created => "created",
            Action::Updated => "updated",
            Action::Deleted => "deleted",
            Action::WorkflowSignal => "workflow-signal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Envelope {
    pub event_id: Uuid,
    pub occurred_at: Timestamp,
    pub org_id: String,
    pub entity_kind: String,
    pub entity_id: String,
    pub version: u64,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<Value>,
}

impl Envelope {
    pub fn new(org_id: &str, entity_kind: &str, entity_id: &str, version: u64, action: Action) -> Self {
        Envelope {
            event_id: Uuid::new_v4(),
            occurred_at: Timestamp::EPOCH,
            org_id: org_id.into(),
            entity_kind: entity_kind.into(),
            entity_id: entity_id.into(),
            version,
            action,
            body: None,
        }
    }

    pub fn with_body(mut self, body: Value) -> Self {
        self.body = Some(body);
        self
    }

    pub fn entity_identifier(&self) -> Option<Identifier> {
        Identifier::new(self.entity_id.clone()).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Event {
    pub topic: String,
    pub publisher: String,
    pub publisher_seq: u64,
    pub envelope: Envelope,
}

pub type Handler = Arc<dyn Fn(&Event) -> Result<(), String> + Send + Sync>;

#[derive(Debug, Clone)]
pub struct BusConfig {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub dead_letter_log: Option<PathBuf>,
}

impl Default for BusConfig {
    fn default() -> Self {
        BusConfig {
            max_attempts: 5,
            initial_backoff: Duration::from_millis(50),
            dead_letter_log: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeadLetter {
    pub subscription: String,
    pub attempts: u32,
    pub last_error: String,
    pub event: Event,
}

struct SubEntry {
    id: u64,
    name: String,
    filter: TopicFilter,
    active: Arc<AtomicBool>,
    tx: Mutex<Option<Sender<Event>>>,
}

#[derive(Default)]
struct Pending {
    count: Mutex<usize>,
    idle: Condvar,
}

impl Pending {
    fn add(&self) {
        *self.count.lock() += 1;
    }

    fn done(&self) {
        let mut c = self.count.lock();
        *c -= 1;
        if *c == 0 {
            self.idle.notify_all();
        }
    }
}

struct DeadLetters {
    entries: Mutex<Vec<DeadLetter>>,
    log: Option<Mutex<File>>,
}

struct BusInner {
    subs: RwLock<Vec<Arc<SubEntry>>>,
    next_sub: AtomicU64,
    closed: AtomicBool,
    publish_lock: Mutex<HashMap<String, u64>>,
    pending: Arc<Pending>,
    dead: Arc<DeadLetters>,
    config: BusConfig,
    clock: Arc<dyn Clock>,
}

#[derive(Clone)]
pub struct EventBus {
    inner: Arc<BusInner>,
}

impl Default for EventBus {
    fn default() -> Self {
        EventBus::new(BusConfig::default(), Arc::new(SystemClock))
    }
}

impl EventBus {
    pub fn new(config: BusConfig, clock: Arc<dyn Clock>) -> Self {
        let log = config.dead_letter_log.as_ref().and_then(|p| {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| tracing::warn!(path = %p.display(), "cannot open dead-letter log: {e}"))
                .ok()
                .map(Mutex::new)
        });
        EventBus {
            inner: Arc::new(BusInner {
                subs: RwLock::new(Vec::new()),
                next_sub: AtomicU64::new(1),
                closed: AtomicBool::new(false),
                publish_lock: Mutex::new(HashMap::new()),
                pending: Arc::new(Pending::default()),
                dead: Arc::new(DeadLetters {
                    entries: Mutex::new(Vec::new()),
                    log,
                }),
                config,
                clock,
            }),
        }
    }

    pub fn clock(&self) -> Arc<dyn Clock> {
        self.inner.clock.clone()
    }

    /// Publishes `envelope` on `topic`, stamping the publisher sequence and,
    /// when unset, the occurrence time.
    pub fn publish(&self, publisher: &str, topic: &str, mut envelope: Envelope) -> Result<Event, BusError> {
        validate_topic(topic)?;
        if self.inner.closed.load(Ordering::SeqCst) {
            return Err(BusError::BusClosed);
        }
        if envelope.occurred_at == Timestamp::EPOCH {
            envelope.occurred_at = self.inner.clock.now();
        }
        let mut seqs = self.inner.publish_lock.lock();
        let seq = seqs.entry(publisher.to_string()).or_insert(0);
        *seq += 1;
        let event = Event {
            topic: topic.to_string(),
            publisher: publisher.to_string(),
            publisher_seq: *seq,
            envelope,
        };
        for sub in self.inner.subs.read().iter() {
            if !sub.filter.matches(topic) {
                continue;
            }
            if let Some(tx) = sub.tx.lock().as_ref() {
                self.inner.pending.add();
                if tx.send(event.clone()).is_err() {
                    self.inner.pending.done();
                }
            }
        }
        drop(seqs);
        Ok(event)
    }

    pub fn subscribe(&self, name: &str, pattern: &str, handler: Handler) -> Result<Subscription, BusError> {
        let filter = TopicFilter::parse(pattern)?;
        if self.inner.closed.load(Ordering::SeqCst) {
            return Err(BusError::BusClosed);
        }
        let id = self.inner.next_sub.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = mpsc::channel::<Event>();
        let active = Arc::new(AtomicBool::new(true));
        let entry = Arc::new(SubEntry {
            id,
            name: name.to_string(),
            filter,
            active: active.clone(),
            tx: Mutex::new(Some(tx)),
        });
        let pending = self.inner.pending.clone();
        let dead = self.inner.dead.clone();
        let config = self.inner.config.clone();
        let sub_name = entry.name.clone();
        thread::Builder::new()
            .name(format!("bus-{name}"))
            .spawn(move || {
                for event in rx {
                    if active.load(Ordering::SeqCst) {
                        deliver(&sub_name, &handler, &event, &config, &dead, &active);
                    }
                    pending.done();
                }
            })
            .expect("spawn delivery thread");
        self.inner.subs.write().push(entry);
        Ok(Subscription {
            id,
            bus: Arc::downgrade(&self.inner),
        })
    }

    /// Blocks until every enqueued event has been handled or dropped.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut count = self.inner.pending.count.lock();
        while *count > 0 {
            if self.inner.pending.idle.wait_until(&mut count, deadline).timed_out() {
                return *count == 0;
            }
        }
        true
    }

    pub fn dead_letters(&self) -> Vec<DeadLetter> {
        self.inner.dead.entries.lock().clone()
    }

    pub fn subscription_count(&self) -> usize {
        self.inner.subs.read().len()
    }

    pub fn close(&self) {
        self.inner.closed.store(true, Ordering::SeqCst);
        for sub in self.inner.subs.write().drain(..) {
            sub.tx.lock().take();
        }
    }
}

fn deliver(
    name: &str,
    handler: &Handler,
    event: &Event,
    config: &BusConfig,
    dead: &DeadLetters,
    active: &AtomicBool,
) {
    let mut backoff = config.initial_backoff;
    let mut last_error = String::new();
    let attempts = config.max_attempts.max(1);
    for attempt in 1..=attempts {
        if !active.load(Ordering::SeqCst) {
            return;
        }
        match handler(event) {
            Ok(()) => return,
            Err(e) => {
                tracing::debug!(subscription = name, attempt, topic = %event.topic, "delivery failed: {e}");
                last_error = e;
                if attempt < attempts {
                    thread::sleep(backoff);
                    backoff *= 2;
                }
            }
        }
    }
    tracing::warn!(subscription = name, topic = %event.topic, "dead-lettered after {attempts} attempts");
    let letter = DeadLetter {
        subscription: name.to_string(),
        attempts,
        last_error,
        event: event.clone(),
    };
    if let Some(log) = &dead.log {
        if let Ok(line) = serde_json::to_string(&letter) {
            let mut f = log.lock();
            let _ = writeln!(f, "{line}").and_then(|_| f.flush());
        }
    }
    dead.entries.lock().push(letter);
}

/// Handle returned by [`EventBus::subscribe`]; dropping it keeps the
/// subscription alive, [`Subscription::unsubscribe`] ends it.
pub struct Subscription {
    id: u64,
    bus: Weak<BusInner>,
}

impl Subscription {
    pub fn unsubscribe(self) {
        if let Some(bus) = self.bus.upgrade() {
            let mut subs = bus.subs.write();
            if let Some(pos) = subs.iter().position(|s| s.id == self.id) {
                let entry = subs.remove(pos);
                entry.active.store(false, Ordering::SeqCst);
                entry.tx.lock().take();
            }
        }
    }
}
