//! A closed BPMN 2.0 subset: parsing, validation and execution of workflow
//! templates with user tasks, exclusive gateways, service tasks, timers and
//! message events.

pub mod audit;
pub mod engine;
pub mod expr;
pub mod invoker;
pub mod parser;
pub mod substitute;
pub mod template;
pub mod templates;

pub use engine::{Engine, EngineConfig, EngineError};
pub use parser::{parse_bpmn, ElementHandler, ElementRegistry};
pub use template::WorkflowTemplate;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("malformed XML: {0}")]
    XmlMalformed(String),
    #[error("unsupported element(s): {}", .0.join(", "))]
    UnsupportedElement(Vec<String>),
    #[error("invalid process graph: {0}")]
    GraphInvalid(String),
    #[error("bad expression {text:?} at {position}: {reason}")]
    BadExpression { text: String, position: usize, reason: String },
    #[error("invalid element {id}: {reason}")]
    InvalidElement { id: String, reason: String },
}

impl From<expr::ExprError> for ParseError {
    fn from(e: expr::ExprError) -> Self {
        ParseError::BadExpression {
            text: e.text,
            position: e.position,
            reason: e.reason,
        }
    }
}
