//! Process instance execution.
//!
//! A token advances from node to node until it rests on a user task, a
//! catch event or an end event. Every state change is audited; every rest
//! point is journaled so an engine reopened on the same directory resumes
//! where it stopped.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use aasfed_core::bus::{Envelope, TopicFilter};
use aasfed_core::clock::{Clock, ManualClock, Timestamp};
use parking_lot::{Mutex, RwLock};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::audit::{AuditEvent, AuditRecord};
use crate::expr::is_identifier;
use crate::invoker::{ServiceInvoker, ServiceRequest};
use crate::parser::ElementRegistry;
use crate::substitute::substitute;
use crate::template::{
    CatchTrigger, EndState, FieldType, FormField, NodeKind, SequenceFlow, ServiceSpec, StartTrigger, WorkflowTemplate,
};
use crate::ParseError;

pub type Variables = serde_json::Map<String, Value>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("unknown process {0}")]
    UnknownProcess(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("task {0} is not open")]
    TaskNotOpen(String),
    #[error("user {user} is not in group {group}")]
    WrongGroup { user: String, group: String },
    #[error("form validation failed: {}", .0.iter().map(|e| format!("{}: {}", e.field, e.message)).collect::<Vec<_>>().join("; "))]
    FormValidation(Vec<FieldError>),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("invalid variable {0}")]
    InvalidVariable(String),
    #[error("storage: {0}")]
    Storage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceState {
    Running,
    Completed,
    Terminated,
    Expired,
}

impl From<EndState> for InstanceState {
    fn from(s: EndState) -> Self {
        match s {
            EndState::Completed => InstanceState::Completed,
            EndState::Terminated => InstanceState::Terminated,
            EndState::Expired => InstanceState::Expired,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ArmedTimer {
    pub node_id: String,
    pub due_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProcessInstance {
    pub instance_id: String,
    pub process_key: String,
    pub version: u32,
    pub state: InstanceState,
    pub variables: Variables,
    pub current_node_id: Option<String>,
    pub started_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ended_at: Option<Timestamp>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub timers: Vec<ArmedTimer>,
    /// Visits per node; the current count is the idempotency epoch.
    #[serde(default)]
    pub visits: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Open,
    Completed,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct UserTaskInstance {
    pub task_id: String,
    pub instance_id: String,
    pub node_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub form_fields: Vec<FormField>,
    pub candidate_group: String,
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submitted_by: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submitted_values: Option<Variables>,
    pub created_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completed_at: Option<Timestamp>,
}

/// Static user → groups table.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Directory {
    pub users: BTreeMap<String, BTreeSet<String>>,
}

impl Directory {
    pub fn with(mut self, user: &str, groups: &[&str]) -> Self {
        self.users
            .entry(user.to_string())
            .or_default()
            .extend(groups.iter().map(|g| g.to_string()));
        self
    }

    pub fn is_member(&self, user: &str, group: &str) -> bool {
        self.users.get(user).is_some_and(|g| g.contains(group))
    }

    pub fn groups_of(&self, user: &str) -> BTreeSet<String> {
        self.users.get(user).cloned().unwrap_or_default()
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub org_id: String,
    pub seed: u64,
    /// Values available to `${...}` placeholders after instance variables.
    pub context: Variables,
    pub directory: Directory,
    pub data_dir: Option<PathBuf>,
}

impl EngineConfig {
    pub fn new(org_id: &str, seed: u64) -> Self {
        EngineConfig {
            org_id: org_id.to_string(),
            seed,
            context: Variables::new(),
            directory: Directory::default(),
            data_dir: None,
        }
    }
}

/// Inputs from outside the engine; replaying them against a fresh engine
/// with the same seed and recorded service responses reproduces the audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "input", rename_all = "kebab-case", rename_all_fields = "camelCase")]
pub enum ExternalInput {
    Start { process_key: String, variables: Variables },
    CompleteTask { task_id: String, user: String, values: Variables },
    Message { topic: String, envelope: Envelope },
    FireTimers { now: Timestamp },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub at: Timestamp,
    #[serde(flatten)]
    pub input: ExternalInput,
}

#[derive(Debug, Clone, Default)]
pub struct InstanceFilter {
    pub process_key: Option<String>,
    pub state: Option<InstanceState>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case", rename_all_fields = "camelCase")]
enum JournalRecord {
    Deployed {
        xml: String,
    },
    Checkpoint {
        instance: ProcessInstance,
        tasks: Vec<UserTaskInstance>,
        ids_issued: u64,
    },
    ServicePending {
        instance: ProcessInstance,
        node_id: String,
        idempotency_key: String,
        #[serde(default)]
        tasks: Vec<UserTaskInstance>,
        ids_issued: u64,
    },
    MessageSeen {
        event_id: String,
    },
}

struct Deployed {
    template: Arc<WorkflowTemplate>,
    xml: String,
}

struct State {
    templates: BTreeMap<String, Vec<Deployed>>,
    instances: BTreeMap<String, ProcessInstance>,
    tasks: BTreeMap<String, UserTaskInstance>,
    audit: Vec<AuditRecord>,
    audit_file: Option<File>,
    journal: Option<File>,
    rng: ChaCha8Rng,
    ids_issued: u64,
    seen_events: HashSet<String>,
    inputs: Vec<InputRecord>,
    dirty: BTreeSet<String>,
}

impl State {
    fn next_id(&mut self) -> String {
        let mut bytes = [0u8; 16];
        self.rng.fill_bytes(&mut bytes);
        self.ids_issued += 1;
        uuid::Builder::from_random_bytes(bytes).into_uuid().to_string()
    }

    fn journal(&mut self, record: &JournalRecord) {
        let Some(f) = self.journal.as_mut() else { return };
        let line = serde_json::to_string(record).expect("journal records serialize");
        if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
            tracing::error!("journal write failed: {e}");
        }
    }

    fn flush_checkpoints(&mut self) {
        for id in std::mem::take(&mut self.dirty) {
            let Some(instance) = self.instances.get(&id).cloned() else { continue };
            let tasks = self.tasks.values().filter(|t| t.instance_id == id).cloned().collect();
            let ids_issued = self.ids_issued;
            self.journal(&JournalRecord::Checkpoint {
                instance,
                tasks,
                ids_issued,
            });
        }
    }

    fn template(&self, key: &str, version: u32) -> Arc<WorkflowTemplate> {
        self.templates[key]
            .iter()
            .find(|d| d.template.version == version)
            .expect("instances reference deployed templates")
            .template
            .clone()
    }
}

pub struct Engine {
    org_id: String,
    clock: Arc<dyn Clock>,
    invoker: RwLock<Arc<dyn ServiceInvoker>>,
    elements: ElementRegistry,
    directory: RwLock<Directory>,
    context: Variables,
    state: Mutex<State>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("org_id", &self.org_id).finish_non_exhaustive()
    }
}

fn open_append(path: &Path) -> Result<File, EngineError> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| EngineError::Storage(format!("{}: {e}", path.display())))
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, EngineError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = File::open(path).map_err(|e| EngineError::Storage(e.to_string()))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| EngineError::Storage(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => out.push(r),
            Err(e) => tracing::warn!(path = %path.display(), line = n + 1, "skipping unreadable record: {e}"),
        }
    }
    Ok(out)
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn check_variables(vars: &Variables) -> Result<(), EngineError> {
    for (k, v) in vars {
        if !is_identifier(k) {
            return Err(EngineError::InvalidVariable(format!("{k:?} is not an identifier")));
        }
        if !matches!(v, Value::String(_) | Value::Number(_) | Value::Bool(_)) {
            return Err(EngineError::InvalidVariable(format!("{k} must be a scalar")));
        }
    }
    Ok(())
}

/// Top-level scalar fields of a message payload, under identifier keys.
fn payload_variables(payload: Option<&Value>) -> Variables {
    payload
        .and_then(Value::as_object)
        .map(|o| {
            o.iter()
                .filter(|(k, v)| is_identifier(k) && matches!(v, Value::String(_) | Value::Number(_) | Value::Bool(_)))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect()
        })
        .unwrap_or_default()
}

pub fn validate_form(fields: &[FormField], values: &Variables) -> Result<Variables, Vec<FieldError>> {
    let mut errors = Vec::new();
    let mut out = Variables::new();
    let err = |field: &str, message: String| FieldError {
        field: field.to_string(),
        message,
    };
    for k in values.keys() {
        if !fields.iter().any(|f| &f.name == k) {
            errors.push(err(k, "unknown field".into()));
        }
    }
    for f in fields {
        let v = match values.get(&f.name) {
            None | Some(Value::Null) => {
                if f.required {
                    errors.push(err(&f.name, "required".into()));
                }
                continue;
            }
            Some(v) => v,
        };
        let coerced = match (&f.field_type, v) {
            (FieldType::String, Value::String(s)) => Ok(Value::String(s.clone())),
            (FieldType::Boolean, Value::Bool(b)) => Ok(Value::Bool(*b)),
            (FieldType::Boolean, Value::String(s)) if s == "true" || s == "false" => Ok(Value::Bool(s == "true")),
            (FieldType::Enum { options }, Value::String(s)) if options.contains(s) => Ok(Value::String(s.clone())),
            (FieldType::Enum { options }, _) => Err(format!("must be one of {}", options.join(", "))),
            (FieldType::String, _) => Err("must be a string".into()),
            (FieldType::Boolean, _) => Err("must be a boolean".into()),
        };
        match coerced {
            Ok(v) => {
                out.insert(f.name.clone(), v);
            }
            Err(m) => errors.push(err(&f.name, m)),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(errors)
    }
}

/// Where execution goes after a node finishes.
enum Step {
    Enter { node_id: String, end_state: Option<EndState> },
    Rest,
}

impl Engine {
    pub fn new(config: EngineConfig, clock: Arc<dyn Clock>, invoker: Arc<dyn ServiceInvoker>) -> Result<Self, EngineError> {
        let engine = Engine {
            org_id: config.org_id,
            clock,
            invoker: RwLock::new(invoker),
            elements: ElementRegistry::default(),
            directory: RwLock::new(config.directory),
            context: config.context,
            state: Mutex::new(State {
                templates: BTreeMap::new(),
                instances: BTreeMap::new(),
                tasks: BTreeMap::new(),
                audit: Vec::new(),
                audit_file: None,
                journal: None,
                rng: ChaCha8Rng::seed_from_u64(config.seed),
                ids_issued: 0,
                seen_events: HashSet::new(),
                inputs: Vec::new(),
                dirty: BTreeSet::new(),
            }),
        };
        if let Some(dir) = &config.data_dir {
            std::fs::create_dir_all(dir).map_err(|e| EngineError::Storage(e.to_string()))?;
            engine.recover(dir, config.seed)?;
        }
        Ok(engine)
    }

    fn recover(&self, dir: &Path, seed: u64) -> Result<(), EngineError> {
        let journal_path = dir.join("journal.jsonl");
        let audit_path = dir.join("audit.jsonl");
        let records: Vec<JournalRecord> = read_lines(&journal_path)?;
        let audit: Vec<AuditRecord> = read_lines(&audit_path)?;
        let mut pending: BTreeMap<String, String> = BTreeMap::new();
        {
            let mut st = self.state.lock();
            st.audit = audit;
            for r in records {
                match r {
                    JournalRecord::Deployed { xml } => {
                        self.install(&mut st, &xml)?;
                    }
                    JournalRecord::Checkpoint {
                        instance,
                        tasks,
                        ids_issued,
                    } => {
                        pending.remove(&instance.instance_id);
                        st.ids_issued = st.ids_issued.max(ids_issued);
                        for t in tasks {
                            st.tasks.insert(t.task_id.clone(), t);
                        }
                        st.instances.insert(instance.instance_id.clone(), instance);
                    }
                    JournalRecord::ServicePending {
                        instance,
                        node_id,
                        tasks,
                        ids_issued,
                        ..
                    } => {
                        st.ids_issued = st.ids_issued.max(ids_issued);
                        for t in tasks {
                            st.tasks.insert(t.task_id.clone(), t);
                        }
                        pending.insert(instance.instance_id.clone(), node_id);
                        st.instances.insert(instance.instance_id.clone(), instance);
                    }
                    JournalRecord::MessageSeen { event_id } => {
                        st.seen_events.insert(event_id);
                    }
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut scratch = [0u8; 16];
            for _ in 0..st.ids_issued {
                rng.fill_bytes(&mut scratch);
            }
            st.rng = rng;
            st.audit_file = Some(open_append(&audit_path)?);
            st.journal = Some(open_append(&journal_path)?);
        }
        for (instance_id, node_id) in pending {
            tracing::info!(%instance_id, %node_id, "resuming in-flight service call");
            let mut st = self.state.lock();
            self.resume_service(&mut st, &instance_id, &node_id);
            st.flush_checkpoints();
        }
        Ok(())
    }

    pub fn org_id(&self) -> &str {
        &self.org_id
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn set_invoker(&self, invoker: Arc<dyn ServiceInvoker>) {
        *self.invoker.write() = invoker;
    }

    pub fn directory(&self) -> Directory {
        self.directory.read().clone()
    }

    pub fn set_directory(&self, directory: Directory) {
        *self.directory.write() = directory;
    }

    // ---- templates ----

    fn install(&self, st: &mut State, xml: &str) -> Result<(Arc<WorkflowTemplate>, bool), EngineError> {
        let mut template = self.elements.parse(xml.as_bytes())?;
        let versions = st.templates.entry(template.process_key.clone()).or_default();
        if let Some(last) = versions.last() {
            if last.xml == xml {
                return Ok((last.template.clone(), false));
            }
        }
        template.version = versions.last().map_or(1, |d| d.template.version + 1);
        let template = Arc::new(template);
        versions.push(Deployed {
            template: template.clone(),
            xml: xml.to_string(),
        });
        Ok((template, true))
    }

    /// Parses and deploys; redeploying identical XML keeps the version.
    pub fn deploy(&self, xml: &[u8]) -> Result<Arc<WorkflowTemplate>, EngineError> {
        let text = std::str::from_utf8(xml).map_err(|e| ParseError::XmlMalformed(e.to_string()))?;
        let mut st = self.state.lock();
        let (template, fresh) = self.install(&mut st, text)?;
        if fresh {
            st.journal(&JournalRecord::Deployed { xml: text.to_string() });
        }
        Ok(template)
    }

    pub fn templates(&self) -> Vec<Arc<WorkflowTemplate>> {
        let st = self.state.lock();
        st.templates
            .values()
            .filter_map(|v| v.last().map(|d| d.template.clone()))
            .collect()
    }

    pub fn template(&self, key: &str) -> Option<Arc<WorkflowTemplate>> {
        let st = self.state.lock();
        st.templates.get(key).and_then(|v| v.last()).map(|d| d.template.clone())
    }

    // ---- queries ----

    pub fn instance(&self, id: &str) -> Result<ProcessInstance, EngineError> {
        self.state
            .lock()
            .instances
            .get(id)
            .cloned()
            .ok_or_else(|| EngineError::NotFound(format!("instance {id}")))
    }

    pub fn list_instances(&self, filter: &InstanceFilter) -> Vec<ProcessInstance> {
        let st = self.state.lock();
        let mut out: Vec<_> = st
            .instances
            .values()
            .filter(|i| filter.process_key.as_ref().is_none_or(|k| &i.process_key == k))
            .filter(|i| filter.state.is_none_or(|s| i.state == s))
            .cloned()
            .collect();
        out.sort_by(|a, b| (a.started_at, &a.instance_id).cmp(&(b.started_at, &b.instance_id)));
        out
    }

    pub fn audit_trail(&self, instance_id: &str) -> Result<Vec<AuditRecord>, EngineError> {
        let st = self.state.lock();
        if !st.instances.contains_key(instance_id) {
            return Err(EngineError::NotFound(format!("instance {instance_id}")));
        }
        Ok(st.audit.iter().filter(|r| r.instance_id == instance_id).cloned().collect())
    }

    pub fn audit_log(&self) -> Vec<AuditRecord> {
        self.state.lock().audit.clone()
    }

    pub fn task(&self, task_id: &str) -> Result<UserTaskInstance, EngineError> {
        self.state
            .lock()
            .tasks
            .get(task_id)
            .cloned()
            .ok_or_else(|| EngineError::NotFound(format!("task {task_id}")))
    }

    pub fn tasks_of(&self, instance_id: &str) -> Vec<UserTaskInstance> {
        let st = self.state.lock();
        st.tasks.values().filter(|t| t.instance_id == instance_id).cloned().collect()
    }

    /// Open tasks, optionally only those offered to `group`.
    pub fn list_open_tasks(&self, group: Option<&str>) -> Vec<UserTaskInstance> {
        let st = self.state.lock();
        let mut out: Vec<_> = st
            .tasks
            .values()
            .filter(|t| t.status == TaskStatus::Open)
            .filter(|t| group.is_none_or(|g| t.candidate_group == g))
            .cloned()
            .collect();
        out.sort_by(|a, b| (a.created_at, &a.task_id).cmp(&(b.created_at, &b.task_id)));
        out
    }

    pub fn inputs(&self) -> Vec<InputRecord> {
        self.state.lock().inputs.clone()
    }

    // ---- operations ----

    pub fn apply(&self, input: ExternalInput) -> Result<Vec<String>, EngineError> {
        match input {
            ExternalInput::Start { process_key, variables } => {
                self.start_instance(&process_key, variables).map(|i| vec![i.instance_id])
            }
            ExternalInput::CompleteTask { task_id, user, values } => {
                self.complete_user_task(&task_id, &user, values).map(|i| vec![i.instance_id])
            }
            ExternalInput::Message { topic, envelope } => Ok(self.deliver_message(&topic, &envelope)),
            ExternalInput::FireTimers { now } => Ok(self.fire_timers(now)),
        }
    }

    fn record_input(&self, st: &mut State, input: ExternalInput) {
        st.inputs.push(InputRecord {
            at: self.clock.now(),
            input,
        });
    }

    pub fn start_instance(&self, process_key: &str, variables: Variables) -> Result<ProcessInstance, EngineError> {
        check_variables(&variables)?;
        let mut st = self.state.lock();
        let template = st
            .templates
            .get(process_key)
            .and_then(|v| v.last())
            .map(|d| d.template.clone())
            .ok_or_else(|| EngineError::UnknownProcess(process_key.to_string()))?;
        self.record_input(
            &mut st,
            ExternalInput::Start {
                process_key: process_key.to_string(),
                variables: variables.clone(),
            },
        );
        let id = self.create_instance(&mut st, &template, variables);
        let start = template.start().node_id.clone();
        self.run(&mut st, &id, Step::Enter {
            node_id: start,
            end_state: None,
        });
        st.flush_checkpoints();
        Ok(st.instances[&id].clone())
    }

    pub fn complete_user_task(&self, task_id: &str, user: &str, values: Variables) -> Result<ProcessInstance, EngineError> {
        let mut st = self.state.lock();
        let task = st
            .tasks
            .get(task_id)
            .cloned()
            .ok_or_else(|| EngineError::NotFound(format!("task {task_id}")))?;
        let running = st
            .instances
            .get(&task.instance_id)
            .is_some_and(|i| i.state == InstanceState::Running);
        if task.status != TaskStatus::Open || !running {
            return Err(EngineError::TaskNotOpen(task_id.to_string()));
        }
        if !self.directory.read().is_member(user, &task.candidate_group) {
            return Err(EngineError::WrongGroup {
                user: user.to_string(),
                group: task.candidate_group.clone(),
            });
        }
        let coerced = validate_form(&task.form_fields, &values).map_err(EngineError::FormValidation)?;
        self.record_input(
            &mut st,
            ExternalInput::CompleteTask {
                task_id: task_id.to_string(),
                user: user.to_string(),
                values,
            },
        );
        let now = self.clock.now();
        {
            let t = st.tasks.get_mut(task_id).expect("checked above");
            t.status = TaskStatus::Completed;
            t.submitted_by = Some(user.to_string());
            t.submitted_values = Some(coerced.clone());
            t.completed_at = Some(now);
        }
        let iid = task.instance_id.clone();
        self.audit(
            &mut st,
            &iid,
            AuditEvent::TaskCompleted {
                task_id: task_id.to_string(),
                user: user.to_string(),
                values: coerced.clone(),
            },
        );
        {
            let inst = st.instances.get_mut(&iid).expect("task instance exists");
            inst.variables.extend(coerced);
            inst.variables.insert("completedBy".into(), Value::String(user.to_string()));
            inst.timers.clear();
        }
        let template = self.template_of(&st, &iid);
        let next = self.leave(&mut st, &iid, &template, &task.node_id);
        self.run(&mut st, &iid, next);
        st.flush_checkpoints();
        Ok(st.instances[&iid].clone())
    }

    /// Advances instances waiting for this event and starts instances of
    /// templates with a matching message start. Redelivered event ids are
    /// ignored.
    pub fn deliver_message(&self, topic: &str, envelope: &Envelope) -> Vec<String> {
        let mut st = self.state.lock();
        if !st.seen_events.insert(envelope.event_id.to_string()) {
            return Vec::new();
        }
        st.journal(&JournalRecord::MessageSeen {
            event_id: envelope.event_id.to_string(),
        });
        self.record_input(
            &mut st,
            ExternalInput::Message {
                topic: topic.to_string(),
                envelope: envelope.clone(),
            },
        );
        let mut affected = Vec::new();
        let waiting: Vec<(String, String)> = st
            .instances
            .values()
            .filter(|i| i.state == InstanceState::Running)
            .filter_map(|i| Some((i.instance_id.clone(), i.current_node_id.clone()?)))
            .collect();
        for (iid, node_id) in waiting {
            let template = self.template_of(&st, &iid);
            let Some(NodeKind::IntermediateCatchEvent {
                trigger:
                    CatchTrigger::Message {
                        topic_pattern,
                        correlation_variable,
                    },
                attached_to: None,
            }) = template.node(&node_id).map(|n| &n.kind)
            else {
                continue;
            };
            let inst = &st.instances[&iid];
            let Ok(pattern) = substitute(topic_pattern, |k| self.lookup(inst, k), false) else {
                continue;
            };
            if !TopicFilter::parse(&pattern).is_ok_and(|f| f.matches(topic)) {
                continue;
            }
            if let Some(var) = correlation_variable {
                if inst.variables.get(var).map(value_text).as_deref() != Some(envelope.entity_id.as_str()) {
                    continue;
                }
            }
            self.audit(
                &mut st,
                &iid,
                AuditEvent::MessageReceived {
                    node_id: node_id.clone(),
                    topic: topic.to_string(),
                    event_id: envelope.event_id.to_string(),
                    payload: envelope.body.clone(),
                },
            );
            {
                let inst = st.instances.get_mut(&iid).expect("listed above");
                inst.variables.extend(payload_variables(envelope.body.as_ref()));
                inst.timers.clear();
            }
            let next = self.leave(&mut st, &iid, &template, &node_id);
            self.run(&mut st, &iid, next);
            affected.push(iid);
        }
        let starters: Vec<(Arc<WorkflowTemplate>, String)> = st
            .templates
            .values()
            .filter_map(|v| v.last())
            .filter_map(|d| match &d.template.start().kind {
                NodeKind::StartEvent {
                    trigger: StartTrigger::Message { topic_pattern },
                } => Some((d.template.clone(), topic_pattern.clone())),
                _ => None,
            })
            .collect();
        for (template, pattern) in starters {
            let Ok(pattern) = substitute(&pattern, |k| self.context.get(k).map(value_text), false) else {
                continue;
            };
            if !TopicFilter::parse(&pattern).is_ok_and(|f| f.matches(topic)) {
                continue;
            }
            let mut vars = payload_variables(envelope.body.as_ref());
            vars.insert("entityId".into(), Value::String(envelope.entity_id.clone()));
            vars.insert("sourceOrg".into(), Value::String(envelope.org_id.clone()));
            let iid = self.create_instance(&mut st, &template, vars);
            let start = template.start().node_id.clone();
            self.audit(
                &mut st,
                &iid,
                AuditEvent::MessageReceived {
                    node_id: start.clone(),
                    topic: topic.to_string(),
                    event_id: envelope.event_id.to_string(),
                    payload: envelope.body.clone(),
                },
            );
            self.run(&mut st, &iid, Step::Enter {
                node_id: start,
                end_state: None,
            });
            affected.push(iid);
        }
        st.flush_checkpoints();
        affected
    }

    /// Fires every armed timer due at or before `now`, earliest first.
    pub fn fire_timers(&self, now: Timestamp) -> Vec<String> {
        let mut st = self.state.lock();
        let mut due: Vec<(Timestamp, String, String)> = st
            .instances
            .values()
            .filter(|i| i.state == InstanceState::Running)
            .flat_map(|i| {
                i.timers
                    .iter()
                    .filter(|t| t.due_at <= now)
                    .map(|t| (t.due_at, i.instance_id.clone(), t.node_id.clone()))
            })
            .collect();
        if due.is_empty() {
            return Vec::new();
        }
        self.record_input(&mut st, ExternalInput::FireTimers { now });
        due.sort();
        let mut affected = Vec::new();
        for (due_at, iid, node_id) in due {
            let still_armed = st.instances[&iid]
                .timers
                .iter()
                .any(|t| t.node_id == node_id && t.due_at == due_at);
            if !still_armed {
                continue;
            }
            let template = self.template_of(&st, &iid);
            self.audit(
                &mut st,
                &iid,
                AuditEvent::TimerFired {
                    node_id: node_id.clone(),
                    due_at,
                },
            );
            st.instances.get_mut(&iid).expect("listed above").timers.clear();
            if let Some(host) = template.node(&node_id).and_then(|n| n.attached_to()) {
                let open: Vec<String> = st
                    .tasks
                    .values()
                    .filter(|t| t.instance_id == iid && t.node_id == host && t.status == TaskStatus::Open)
                    .map(|t| t.task_id.clone())
                    .collect();
                for task_id in open {
                    let t = st.tasks.get_mut(&task_id).expect("listed above");
                    t.status = TaskStatus::Cancelled;
                    t.completed_at = Some(now);
                    self.audit(&mut st, &iid, AuditEvent::TaskCancelled { task_id });
                }
            }
            let next = self.leave(&mut st, &iid, &template, &node_id);
            self.run(&mut st, &iid, next);
            affected.push(iid);
        }
        st.flush_checkpoints();
        affected
    }

    /// Earliest armed timer across running instances.
    pub fn next_timer_due(&self) -> Option<Timestamp> {
        let st = self.state.lock();
        st.instances
            .values()
            .filter(|i| i.state == InstanceState::Running)
            .flat_map(|i| i.timers.iter().map(|t| t.due_at))
            .min()
    }

    // ---- execution ----

    fn template_of(&self, st: &State, iid: &str) -> Arc<WorkflowTemplate> {
        let inst = &st.instances[iid];
        st.template(&inst.process_key, inst.version)
    }

    fn lookup(&self, inst: &ProcessInstance, key: &str) -> Option<String> {
        inst.variables
            .get(key)
            .or_else(|| self.context.get(key))
            .map(value_text)
            .or_else(|| match key {
                "instanceId" => Some(inst.instance_id.clone()),
                "processKey" => Some(inst.process_key.clone()),
                "orgId" => Some(self.org_id.clone()),
                _ => None,
            })
    }

    fn audit(&self, st: &mut State, instance_id: &str, event: AuditEvent) {
        let record = AuditRecord {
            seq: st.audit.last().map_or(1, |r| r.seq + 1),
            timestamp: self.clock.now(),
            instance_id: instance_id.to_string(),
            event,
        };
        if let Some(f) = st.audit_file.as_mut() {
            let line = serde_json::to_string(&record).expect("audit records serialize");
            if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
                tracing::error!("audit write failed: {e}");
            }
        }
        st.audit.push(record);
        st.dirty.insert(instance_id.to_string());
    }

    fn create_instance(&self, st: &mut State, template: &WorkflowTemplate, variables: Variables) -> String {
        let id = st.next_id();
        let inst = ProcessInstance {
            instance_id: id.clone(),
            process_key: template.process_key.clone(),
            version: template.version,
            state: InstanceState::Running,
            variables: variables.clone(),
            current_node_id: None,
            started_at: self.clock.now(),
            ended_at: None,
            timers: Vec::new(),
            visits: BTreeMap::new(),
        };
        st.instances.insert(id.clone(), inst);
        self.audit(
            st,
            &id,
            AuditEvent::InstanceCreated {
                process_key: template.process_key.clone(),
                version: template.version,
                variables,
            },
        );
        id
    }

    /// Completes `node_id` and takes its single outgoing flow.
    fn leave(&self, st: &mut State, iid: &str, template: &WorkflowTemplate, node_id: &str) -> Step {
        self.audit(
            st,
            iid,
            AuditEvent::NodeCompleted {
                node_id: node_id.to_string(),
            },
        );
        let flow = template.outgoing(node_id).next().expect("validated: every non-end node has a flow").clone();
        self.take(st, iid, &flow, None)
    }

    fn take(&self, st: &mut State, iid: &str, flow: &SequenceFlow, condition_result: Option<bool>) -> Step {
        self.audit(
            st,
            iid,
            AuditEvent::FlowTaken {
                flow_id: flow.flow_id.clone(),
                condition_result,
            },
        );
        Step::Enter {
            node_id: flow.target.clone(),
            end_state: flow.end_state,
        }
    }

    fn end(&self, st: &mut State, iid: &str, state: EndState) {
        let now = self.clock.now();
        {
            let inst = st.instances.get_mut(iid).expect("instance exists");
            inst.state = state.into();
            inst.ended_at = Some(now);
            inst.timers.clear();
        }
        self.audit(st, iid, AuditEvent::InstanceEnded { state });
    }

    fn run(&self, st: &mut State, iid: &str, mut step: Step) {
        let template = self.template_of(st, iid);
        while let Step::Enter { node_id, end_state } = step {
            step = self.enter(st, iid, &template, &node_id, end_state);
        }
    }

    fn arm_boundary_timers(&self, st: &mut State, iid: &str, template: &WorkflowTemplate, node_id: &str) {
        let now = self.clock.now();
        let timers: Vec<ArmedTimer> = template
            .boundary_events(node_id)
            .filter_map(|b| match &b.kind {
                NodeKind::IntermediateCatchEvent {
                    trigger: CatchTrigger::Timer { duration_ms },
                    ..
                } => Some(ArmedTimer {
                    node_id: b.node_id.clone(),
                    due_at: now.plus_millis(*duration_ms as i64),
                }),
                _ => None,
            })
            .collect();
        st.instances.get_mut(iid).expect("instance exists").timers.extend(timers);
    }

    fn enter(&self, st: &mut State, iid: &str, template: &WorkflowTemplate, node_id: &str, end_state: Option<EndState>) -> Step {
        let node = template.node(node_id).expect("validated flow target").clone();
        self.audit(
            st,
            iid,
            AuditEvent::NodeEntered {
                node_id: node_id.to_string(),
            },
        );
        {
            let inst = st.instances.get_mut(iid).expect("instance exists");
            inst.current_node_id = Some(node_id.to_string());
            *inst.visits.entry(node_id.to_string()).or_default() += 1;
        }
        match &node.kind {
            NodeKind::StartEvent { .. } => self.leave(st, iid, template, node_id),
            NodeKind::EndEvent { state } => {
                self.audit(
                    st,
                    iid,
                    AuditEvent::NodeCompleted {
                        node_id: node_id.to_string(),
                    },
                );
                self.end(st, iid, end_state.unwrap_or(*state));
                Step::Rest
            }
            NodeKind::UserTask {
                form_fields,
                candidate_group,
            } => {
                let task_id = st.next_id();
                st.tasks.insert(
                    task_id.clone(),
                    UserTaskInstance {
                        task_id: task_id.clone(),
                        instance_id: iid.to_string(),
                        node_id: node_id.to_string(),
                        name: node.name.clone(),
                        form_fields: form_fields.clone(),
                        candidate_group: candidate_group.clone(),
                        status: TaskStatus::Open,
                        submitted_by: None,
                        submitted_values: None,
                        created_at: self.clock.now(),
                        completed_at: None,
                    },
                );
                self.audit(
                    st,
                    iid,
                    AuditEvent::TaskAssigned {
                        task_id,
                        node_id: node_id.to_string(),
                        candidate_group: candidate_group.clone(),
                    },
                );
                self.arm_boundary_timers(st, iid, template, node_id);
                Step::Rest
            }
            NodeKind::ServiceTask(spec) => self.service_task(st, iid, template, node_id, spec),
            NodeKind::ExclusiveGateway { default } => self.gateway(st, iid, template, node_id, default.as_deref()),
            NodeKind::IntermediateCatchEvent {
                trigger: CatchTrigger::Timer { duration_ms },
                ..
            } => {
                let due_at = self.clock.now().plus_millis(*duration_ms as i64);
                st.instances
                    .get_mut(iid)
                    .expect("instance exists")
                    .timers
                    .push(ArmedTimer {
                        node_id: node_id.to_string(),
                        due_at,
                    });
                Step::Rest
            }
            NodeKind::IntermediateCatchEvent {
                trigger: CatchTrigger::Message { .. },
                ..
            } => {
                self.arm_boundary_timers(st, iid, template, node_id);
                Step::Rest
            }
        }
    }

    fn gateway(&self, st: &mut State, iid: &str, template: &WorkflowTemplate, node_id: &str, default: Option<&str>) -> Step {
        let vars = st.instances[iid].variables.clone();
        let mut chosen: Option<SequenceFlow> = None;
        for flow in template.outgoing(node_id) {
            let Some(cond) = &flow.condition else { continue };
            let eval = cond.evaluate(&vars);
            if let Some(message) = eval.warning {
                tracing::warn!(instance = iid, flow = %flow.flow_id, "{message}");
                self.audit(
                    st,
                    iid,
                    AuditEvent::ConditionWarning {
                        flow_id: flow.flow_id.clone(),
                        message,
                    },
                );
            }
            if eval.result && chosen.is_none() {
                chosen = Some(flow.clone());
            }
        }
        self.audit(
            st,
            iid,
            AuditEvent::NodeCompleted {
                node_id: node_id.to_string(),
            },
        );
        match (chosen, default.and_then(|d| template.flow(d))) {
            (Some(f), _) => self.take(st, iid, &f, Some(true)),
            (None, Some(d)) => {
                let d = d.clone();
                self.take(st, iid, &d, None)
            }
            (None, None) => {
                tracing::warn!(instance = iid, gateway = node_id, "no outgoing flow applies");
                self.end(st, iid, EndState::Terminated);
                Step::Rest
            }
        }
    }

    fn idempotency_key(inst: &ProcessInstance, node_id: &str) -> String {
        let epoch = inst.visits.get(node_id).copied().unwrap_or(0);
        format!("{}:{node_id}:{epoch}", inst.instance_id)
    }

    fn service_task(&self, st: &mut State, iid: &str, template: &WorkflowTemplate, node_id: &str, spec: &ServiceSpec) -> Step {
        let inst = st.instances[iid].clone();
        let key = Self::idempotency_key(&inst, node_id);
        let tasks = st.tasks.values().filter(|t| t.instance_id == iid).cloned().collect();
        st.journal(&JournalRecord::ServicePending {
            instance: inst,
            node_id: node_id.to_string(),
            idempotency_key: key.clone(),
            tasks,
            ids_issued: st.ids_issued,
        });
        self.call_service(st, iid, template, node_id, spec, key)
    }

    fn resume_service(&self, st: &mut State, iid: &str, node_id: &str) {
        let template = self.template_of(st, iid);
        let Some(NodeKind::ServiceTask(spec)) = template.node(node_id).map(|n| n.kind.clone()) else {
            return;
        };
        let key = Self::idempotency_key(&st.instances[iid], node_id);
        let next = self.call_service(st, iid, &template, node_id, &spec, key);
        st.dirty.insert(iid.to_string());
        self.run(st, iid, next);
    }

    /// At most two attempts with the same idempotency key; a second failure
    /// terminates the instance.
    fn call_service(
        &self,
        st: &mut State,
        iid: &str,
        template: &WorkflowTemplate,
        node_id: &str,
        spec: &ServiceSpec,
        idempotency_key: String,
    ) -> Step {
        let inst = st.instances[iid].clone();
        let url = substitute(&spec.url_template, |k| self.lookup(&inst, k), false);
        let body = spec
            .body_template
            .as_ref()
            .map(|b| substitute(b, |k| self.lookup(&inst, k), true))
            .transpose();
        let (url, body) = match (url, body) {
            (Ok(u), Ok(b)) => (u, b),
            (Err(missing), _) | (_, Err(missing)) => {
                self.audit(
                    st,
                    iid,
                    AuditEvent::ServiceCall {
                        node_id: node_id.to_string(),
                        request: ServiceRequest {
                            method: spec.http_method.clone(),
                            url: spec.url_template.clone(),
                            body: spec.body_template.clone(),
                            idempotency_key,
                        },
                        response_code: None,
                        error: Some(format!("unresolved variable {missing}")),
                    },
                );
                self.end(st, iid, EndState::Terminated);
                return Step::Rest;
            }
        };
        let request = ServiceRequest {
            method: spec.http_method.clone(),
            url,
            body,
            idempotency_key,
        };
        let invoker = self.invoker.read().clone();
        for attempt in 1..=2 {
            let outcome = invoker.invoke(&request);
            let (code, error) = match &outcome {
                Ok(r) => (Some(r.status), None),
                Err(e) => (None, Some(e.clone())),
            };
            self.audit(
                st,
                iid,
                AuditEvent::ServiceCall {
                    node_id: node_id.to_string(),
                    request: request.clone(),
                    response_code: code,
                    error,
                },
            );
            match outcome {
                Ok(resp) if resp.is_success() => {
                    if let Some(var) = &spec.result_variable {
                        let value = extract_result(&resp.body, spec.result_path.as_deref());
                        st.instances
                            .get_mut(iid)
                            .expect("instance exists")
                            .variables
                            .insert(var.clone(), value);
                    }
                    return self.leave(st, iid, template, node_id);
                }
                Ok(resp) if !resp.is_transient() => break,
                _ if attempt == 1 => tracing::warn!(instance = iid, node = node_id, "service call failed, retrying"),
                _ => {}
            }
        }
        self.end(st, iid, EndState::Terminated);
        Step::Rest
    }
}

fn extract_result(body: &str, path: Option<&str>) -> Value {
    let Ok(mut v) = serde_json::from_str::<Value>(body) else {
        return Value::String(body.to_string());
    };
    if let Some(path) = path {
        for seg in path.split('.') {
            v = match v {
                Value::Object(mut o) => o.remove(seg).unwrap_or(Value::Null),
                _ => Value::Null,
            };
        }
    }
    match v {
        Value::String(_) | Value::Number(_) | Value::Bool(_) => v,
        Value::Null => Value::String(String::new()),
        other => Value::String(other.to_string()),
    }
}

/// Re-applies recorded inputs, setting the clock to each input's time.
pub fn replay(engine: &Engine, clock: &ManualClock, inputs: &[InputRecord]) -> Result<(), EngineError> {
    for r in inputs {
        clock.set(r.at);
        engine.apply(r.input.clone())?;
    }
    Ok(())
}
