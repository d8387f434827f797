//! BPMN XML to [`WorkflowTemplate`].
//!
//! Each supported element is handled by an [`ElementHandler`] registered
//! under its local name; anything without a handler is reported as
//! unsupported. Extension attributes and elements live in [`EXT_NS`].

use std::collections::BTreeMap;
use std::sync::Arc;

use roxmltree::{Document, Node as XmlNode};

use crate::expr::{is_identifier, Condition};
use crate::template::{
    CatchTrigger, EndState, FieldType, FormField, Node, NodeKind, SequenceFlow, ServiceSpec, StartTrigger,
    WorkflowTemplate,
};
use crate::ParseError;

pub const BPMN_NS: &str = "http://www.omg.org/spec/BPMN/20100524/MODEL";
pub const EXT_NS: &str = "urn:aasfed:bpmn-ext:1";
const DIAGRAM_NAMESPACES: [&str; 3] = [
    "http://www.omg.org/spec/BPMN/20100524/DI",
    "http://www.omg.org/spec/DD/20100524/DC",
    "http://www.omg.org/spec/DD/20100524/DI",
];

/// State accumulated while walking one `<process>`.
#[derive(Debug, Default)]
pub struct ParseContext {
    pub nodes: Vec<Node>,
    pub flows: Vec<SequenceFlow>,
    unsupported: Vec<String>,
}

impl ParseContext {
    pub fn unsupported(&mut self, name: &str) {
        if !self.unsupported.iter().any(|n| n == name) {
            self.unsupported.push(name.to_string());
        }
    }

    /// Flags every child element not named in `allowed`; false if any was.
    pub fn check_children(&mut self, el: XmlNode<'_, '_>, allowed: &[&str]) -> bool {
        let mut ok = true;
        for child in el.children().filter(|c| c.is_element()) {
            let name = child.tag_name().name();
            if is_diagram(child) {
                continue;
            }
            if !allowed.contains(&name) {
                self.unsupported(name);
                ok = false;
            }
        }
        ok
    }
}

pub trait ElementHandler: Send + Sync {
    fn handle(&self, el: XmlNode<'_, '_>, cx: &mut ParseContext) -> Result<(), ParseError>;
}

/// Handlers for the element names allowed inside `<process>`.
#[derive(Clone)]
pub struct ElementRegistry {
    handlers: BTreeMap<String, Arc<dyn ElementHandler>>,
}

impl Default for ElementRegistry {
    fn default() -> Self {
        let mut r = ElementRegistry {
            handlers: BTreeMap::new(),
        };
        r.register("startEvent", Arc::new(StartEventHandler));
        r.register("endEvent", Arc::new(EndEventHandler));
        r.register("userTask", Arc::new(UserTaskHandler));
        r.register("serviceTask", Arc::new(ServiceTaskHandler));
        r.register("exclusiveGateway", Arc::new(GatewayHandler));
        r.register("intermediateCatchEvent", Arc::new(CatchEventHandler));
        r.register("boundaryEvent", Arc::new(BoundaryEventHandler));
        r.register("sequenceFlow", Arc::new(SequenceFlowHandler));
        r
    }
}

impl ElementRegistry {
    pub fn register(&mut self, name: &str, handler: Arc<dyn ElementHandler>) {
        self.handlers.insert(name.to_string(), handler);
    }

    pub fn names(&self) -> Vec<&str> {
        self.handlers.keys().map(String::as_str).collect()
    }

    pub fn parse(&self, xml: &[u8]) -> Result<WorkflowTemplate, ParseError> {
        let text = std::str::from_utf8(xml).map_err(|e| ParseError::XmlMalformed(e.to_string()))?;
        let doc = Document::parse(text).map_err(|e| ParseError::XmlMalformed(e.to_string()))?;
        let root = doc.root_element();
        if root.tag_name().name() != "definitions" {
            return Err(ParseError::XmlMalformed(format!(
                "root element is {}, expected definitions",
                root.tag_name().name()
            )));
        }
        let mut cx = ParseContext::default();
        let mut processes = Vec::new();
        for child in root.children().filter(|c| c.is_element()) {
            match child.tag_name().name() {
                _ if is_diagram(child) => {}
                "process" => processes.push(child),
                "documentation" => {}
                other => cx.unsupported(other),
            }
        }
        let process = match processes.as_slice() {
            [p] => *p,
            [] if !cx.unsupported.is_empty() => return Err(ParseError::UnsupportedElement(cx.unsupported)),
            [] => return Err(ParseError::GraphInvalid("no process element".into())),
            _ => return Err(ParseError::GraphInvalid("more than one process element".into())),
        };
        let process_key = required_attr(process, "id")?.to_string();
        for el in process.children().filter(|c| c.is_element()) {
            let name = el.tag_name().name();
            if is_diagram(el) || matches!(name, "documentation" | "extensionElements") {
                continue;
            }
            match self.handlers.get(name) {
                Some(h) => h.handle(el, &mut cx)?,
                None => cx.unsupported(name),
            }
        }
        if !cx.unsupported.is_empty() {
            return Err(ParseError::UnsupportedElement(cx.unsupported));
        }
        let template = WorkflowTemplate {
            process_key,
            name: process.attribute("name").map(str::to_string),
            nodes: cx.nodes,
            flows: cx.flows,
            version: 1,
        };
        template.validate()?;
        Ok(template)
    }
}

pub fn parse_bpmn(xml: &[u8]) -> Result<WorkflowTemplate, ParseError> {
    ElementRegistry::default().parse(xml)
}

fn is_diagram(el: XmlNode<'_, '_>) -> bool {
    el.tag_name().namespace().is_some_and(|ns| DIAGRAM_NAMESPACES.contains(&ns))
}

fn id_of(el: XmlNode<'_, '_>) -> String {
    el.attribute("id").unwrap_or("?").to_string()
}

fn required_attr<'a>(el: XmlNode<'a, '_>, name: &str) -> Result<&'a str, ParseError> {
    el.attribute(name).filter(|v| !v.trim().is_empty()).ok_or_else(|| ParseError::InvalidElement {
        id: id_of(el),
        reason: format!("{} requires attribute {name}", el.tag_name().name()),
    })
}

fn ext_attr<'a>(el: XmlNode<'a, '_>, name: &str) -> Option<&'a str> {
    el.attribute((EXT_NS, name))
}

fn required_ext<'a>(el: XmlNode<'a, '_>, name: &str) -> Result<&'a str, ParseError> {
    ext_attr(el, name).filter(|v| !v.trim().is_empty()).ok_or_else(|| ParseError::InvalidElement {
        id: id_of(el),
        reason: format!("{} requires ext:{name}", el.tag_name().name()),
    })
}

fn invalid(el: XmlNode<'_, '_>, reason: impl Into<String>) -> ParseError {
    ParseError::InvalidElement {
        id: id_of(el),
        reason: reason.into(),
    }
}

fn child<'a, 'i>(el: XmlNode<'a, 'i>, name: &str) -> Option<XmlNode<'a, 'i>> {
    el.children().find(|c| c.is_element() && c.tag_name().name() == name)
}

fn ext_children<'a, 'i>(el: XmlNode<'a, 'i>, name: &'static str) -> impl Iterator<Item = XmlNode<'a, 'i>> {
    child(el, "extensionElements")
        .into_iter()
        .flat_map(|x| x.children())
        .filter(move |c| c.is_element() && c.tag_name().namespace() == Some(EXT_NS) && c.tag_name().name() == name)
}

fn node(el: XmlNode<'_, '_>, kind: NodeKind) -> Result<Node, ParseError> {
    Ok(Node {
        node_id: required_attr(el, "id")?.to_string(),
        name: el.attribute("name").map(str::to_string),
        kind,
    })
}

const FLOW_REFS: [&str; 3] = ["incoming", "outgoing", "documentation"];

fn allowed<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    FLOW_REFS.iter().copied().chain(extra.iter().copied()).collect()
}

fn parse_duration(el: XmlNode<'_, '_>, def: XmlNode<'_, '_>) -> Result<u64, ParseError> {
    let text = child(def, "timeDuration")
        .and_then(|d| d.text())
        .map(str::trim)
        .ok_or_else(|| invalid(el, "timer requires timeDuration"))?;
    let parsed = iso8601::duration(text).map_err(|e| invalid(el, e))?;
    let ms = std::time::Duration::from(parsed).as_millis() as u64;
    if ms == 0 {
        return Err(invalid(el, "timer duration must be positive"));
    }
    Ok(ms)
}

fn message_pattern(el: XmlNode<'_, '_>, def: XmlNode<'_, '_>) -> Result<String, ParseError> {
    let pattern = required_ext(def, "topic").map_err(|_| invalid(el, "message event requires ext:topic"))?;
    // Placeholders are resolved per instance; check the shape with them blanked.
    let probe = crate::substitute::blank_placeholders(pattern);
    aasfed_core::bus::TopicFilter::parse(&probe).map_err(|e| invalid(el, e.to_string()))?;
    Ok(pattern.to_string())
}

struct StartEventHandler;

impl ElementHandler for StartEventHandler {
    fn handle(&self, el: XmlNode<'_, '_>, cx: &mut ParseContext) -> Result<(), ParseError> {
        if !cx.check_children(el, &allowed(&["messageEventDefinition"])) {
            return Ok(());
        }
        let trigger = match child(el, "messageEventDefinition") {
            Some(def) => StartTrigger::Message {
                topic_pattern: message_pattern(el, def)?,
            },
            None => StartTrigger::None,
        };
        cx.nodes.push(node(el, NodeKind::StartEvent { trigger })?);
        Ok(())
    }
}

struct EndEventHandler;

impl ElementHandler for EndEventHandler {
    fn handle(&self, el: XmlNode<'_, '_>, cx: &mut ParseContext) -> Result<(), ParseError> {
        cx.check_children(el, &allowed(&[]));
        let state = match ext_attr(el, "endState") {
            Some(s) => EndState::parse(s).ok_or_else(|| invalid(el, format!("unknown end state {s}")))?,
            None => EndState::Completed,
        };
        cx.nodes.push(node(el, NodeKind::EndEvent { state })?);
        Ok(())
    }
}

struct UserTaskHandler;

impl ElementHandler for UserTaskHandler {
    fn handle(&self, el: XmlNode<'_, '_>, cx: &mut ParseContext) -> Result<(), ParseError> {
        cx.check_children(el, &allowed(&["extensionElements"]));
        let candidate_group = required_ext(el, "candidateGroup")?.to_string();
        let mut form_fields: Vec<FormField> = Vec::new();
        for f in ext_children(el, "formField") {
            let name = f.attribute("name").unwrap_or_default();
            if !is_identifier(name) {
                return Err(invalid(el, format!("form field name {name:?} is not an identifier")));
            }
            if form_fields.iter().any(|x| x.name == name) {
                return Err(invalid(el, format!("form field {name} declared twice")));
            }
            let field_type = match f.attribute("type").unwrap_or("string") {
                "string" => FieldType::String,
                "boolean" => FieldType::Boolean,
                "enum" => {
                    let options: Vec<String> = f
                        .attribute("options")
                        .unwrap_or_default()
                        .split(',')
                        .map(str::trim)
                        .filter(|o| !o.is_empty())
                        .map(str::to_string)
                        .collect();
                    if options.is_empty() {
                        return Err(invalid(el, format!("enum field {name} has no options")));
                    }
                    FieldType::Enum { options }
                }
                other => return Err(invalid(el, format!("field {name} has unknown type {other}"))),
            };
            let required = match f.attribute("required").unwrap_or("false") {
                "true" => true,
                "false" => false,
                other => return Err(invalid(el, format!("field {name}: required={other:?}"))),
            };
            form_fields.push(FormField {
                name: name.to_string(),
                field_type,
                required,
            });
        }
        cx.nodes.push(node(
            el,
            NodeKind::UserTask {
                form_fields,
                candidate_group,
            },
        )?);
        Ok(())
    }
}

const METHODS: [&str; 5] = ["GET", "POST", "PUT", "PATCH", "DELETE"];

struct ServiceTaskHandler;

impl ElementHandler for ServiceTaskHandler {
    fn handle(&self, el: XmlNode<'_, '_>, cx: &mut ParseContext) -> Result<(), ParseError> {
        cx.check_children(el, &allowed(&["extensionElements"]));
        let method = required_ext(el, "method")?.to_ascii_uppercase();
        if !METHODS.contains(&method.as_str()) {
            return Err(invalid(el, format!("unsupported method {method}")));
        }
        let result_variable = ext_attr(el, "resultVariable").map(str::to_string);
        if let Some(v) = &result_variable {
            if !is_identifier(v) {
                return Err(invalid(el, format!("result variable {v:?} is not an identifier")));
            }
        }
        let spec = ServiceSpec {
            http_method: method,
            url_template: required_ext(el, "url")?.to_string(),
            body_template: ext_children(el, "body")
                .next()
                .and_then(|b| b.text())
                .map(|t| t.trim().to_string()),
            result_variable,
            result_path: ext_attr(el, "resultPath").map(str::to_string),
        };
        cx.nodes.push(node(el, NodeKind::ServiceTask(spec))?);
        Ok(())
    }
}

struct GatewayHandler;

impl ElementHandler for GatewayHandler {
    fn handle(&self, el: XmlNode<'_, '_>, cx: &mut ParseContext) -> Result<(), ParseError> {
        cx.check_children(el, &allowed(&[]));
        let default = el.attribute("default").map(str::to_string);
        cx.nodes.push(node(el, NodeKind::ExclusiveGateway { default })?);
        Ok(())
    }
}

/// `None` when an unsupported child was found; the parse fails later with
/// every offender listed.
fn catch_trigger(el: XmlNode<'_, '_>, cx: &mut ParseContext) -> Result<Option<CatchTrigger>, ParseError> {
    if !cx.check_children(el, &allowed(&["timerEventDefinition", "messageEventDefinition"])) {
        return Ok(None);
    }
    if let Some(def) = child(el, "timerEventDefinition") {
        if !cx.check_children(def, &["timeDuration"]) {
            return Ok(None);
        }
        return Ok(Some(CatchTrigger::Timer {
            duration_ms: parse_duration(el, def)?,
        }));
    }
    if let Some(def) = child(el, "messageEventDefinition") {
        let correlation_variable = ext_attr(el, "correlationVariable").map(str::to_string);
        if let Some(v) = &correlation_variable {
            if !is_identifier(v) {
                return Err(invalid(el, format!("correlation variable {v:?} is not an identifier")));
            }
        }
        return Ok(Some(CatchTrigger::Message {
            topic_pattern: message_pattern(el, def)?,
            correlation_variable,
        }));
    }
    Err(invalid(el, "catch event needs a timer or message definition"))
}

struct CatchEventHandler;

impl ElementHandler for CatchEventHandler {
    fn handle(&self, el: XmlNode<'_, '_>, cx: &mut ParseContext) -> Result<(), ParseError> {
        let Some(trigger) = catch_trigger(el, cx)? else {
            return Ok(());
        };
        cx.nodes.push(node(
            el,
            NodeKind::IntermediateCatchEvent {
                trigger,
                attached_to: None,
            },
        )?);
        Ok(())
    }
}

/// Interrupting timer attached to a waiting node.
struct BoundaryEventHandler;

impl ElementHandler for BoundaryEventHandler {
    fn handle(&self, el: XmlNode<'_, '_>, cx: &mut ParseContext) -> Result<(), ParseError> {
        let Some(trigger) = catch_trigger(el, cx)? else {
            return Ok(());
        };
        if !matches!(trigger, CatchTrigger::Timer { .. }) {
            return Err(invalid(el, "only timer boundary events are supported"));
        }
        if el.attribute("cancelActivity") == Some("false") {
            return Err(invalid(el, "non-interrupting boundary events are not supported"));
        }
        let attached_to = Some(required_attr(el, "attachedToRef")?.to_string());
        cx.nodes.push(node(el, NodeKind::IntermediateCatchEvent { trigger, attached_to })?);
        Ok(())
    }
}

struct SequenceFlowHandler;

impl ElementHandler for SequenceFlowHandler {
    fn handle(&self, el: XmlNode<'_, '_>, cx: &mut ParseContext) -> Result<(), ParseError> {
        cx.check_children(el, &["conditionExpression", "documentation"]);
        let condition = match child(el, "conditionExpression") {
            Some(c) => {
                let text = c.text().unwrap_or_default().trim();
                Some(Condition::parse(text)?)
            }
            None => None,
        };
        let end_state = match ext_attr(el, "endState") {
            Some(s) => Some(EndState::parse(s).ok_or_else(|| invalid(el, format!("unknown end state {s}")))?),
            None => None,
        };
        cx.flows.push(SequenceFlow {
            flow_id: required_attr(el, "id")?.to_string(),
            source: required_attr(el, "sourceRef")?.to_string(),
            target: required_attr(el, "targetRef")?.to_string(),
            condition,
            end_state,
        });
        Ok(())
    }
}
