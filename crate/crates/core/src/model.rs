//! AAS metamodel subset: shells, submodels, submodel elements and the
//! canonical JSON form every other module hashes, stores and ships.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use sha2::{Digest as _, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::clock::Timestamp;

pub const MAX_IDENTIFIER_LEN: usize = 2048;
pub const MAX_COLLECTION_DEPTH: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid identifier: {0}")]
    InvalidIdentifier(String),
    #[error("malformed path encoding: {0}")]
    MalformedEncoding(String),
    #[error("invalid entity: {0}")]
    InvalidEntity(String),
    #[error("malformed canonical document: {0}")]
    Malformed(String),
}

/// Globally unique identifier (URN or URL form).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Identifier(String);

impl Identifier {
    pub fn new(value: impl Into<String>) -> Result<Self, ModelError> {
        let value = value.into();
        if value.is_empty() {
            return Err(ModelError::InvalidIdentifier("empty".into()));
        }
        if value.chars().count() > MAX_IDENTIFIER_LEN {
            return Err(ModelError::InvalidIdentifier(format!(
                "longer than {MAX_IDENTIFIER_LEN} characters"
            )));
        }
        if value.chars().any(char::is_whitespace) {
            return Err(ModelError::InvalidIdentifier(format!("{value:?} contains whitespace")));
        }
        Ok(Identifier(value.nfc().collect()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Unpadded base64url of the UTF-8 value, for use as a URL path segment.
    pub fn to_path(&self) -> String {
        URL_SAFE_NO_PAD.encode(self.0.as_bytes())
    }

    pub fn from_path(segment: &str) -> Result<Self, ModelError> {
        if segment.is_empty() {
            return Err(ModelError::MalformedEncoding("empty segment".into()));
        }
        let bytes = URL_SAFE_NO_PAD
            .decode(segment)
            .map_err(|e| ModelError::MalformedEncoding(e.to_string()))?;
        let s = String::from_utf8(bytes).map_err(|e| ModelError::MalformedEncoding(e.to_string()))?;
        Identifier::new(s).map_err(|e| ModelError::MalformedEncoding(e.to_string()))
    }
}

impl fmt::Display for Identifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for Identifier {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Identifier::new(s)
    }
}

impl Serialize for Identifier {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for Identifier {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Identifier::new(s).map_err(serde::de::Error::custom)
    }
}

/// SHA-256 digest, rendered as lowercase hex.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for Digest {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(|e| ModelError::Malformed(format!("digest {s:?}: {e}")))?;
        Ok(Digest(out))
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CloneProvenance {
    pub source_id: Identifier,
    pub source_version: u64,
    pub source_organization: String,
    pub cloned_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueType {
    String,
    Integer,
    Double,
    Boolean,
}

impl ValueType {
    pub fn accepts(self, value: &str) -> bool {
        match self {
            ValueType::String => true,
            ValueType::Integer => value.parse::<i64>().is_ok(),
            ValueType::Double => value.parse::<f64>().map(f64::is_finite).unwrap_or(false),
            ValueType::Boolean => matches!(value, "true" | "false"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all_fields = "camelCase")]
pub enum SubmodelElement {
    Property {
        id_short: String,
        value_type: ValueType,
        value: String,
    },
    Collection {
        id_short: String,
        elements: Vec<SubmodelElement>,
    },
    FileAttachment {
        id_short: String,
        content_type: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        digest: Option<Digest>,
        length: u64,
    },
}

impl SubmodelElement {
    pub fn property(id_short: &str, value_type: ValueType, value: impl Into<String>) -> Self {
        SubmodelElement::Property {
            id_short: id_short.into(),
            value_type,
            value: value.into(),
        }
    }

    pub fn collection(id_short: &str, elements: Vec<SubmodelElement>) -> Self {
        SubmodelElement::Collection {
            id_short: id_short.into(),
            elements,
        }
    }

    pub fn attachment(id_short: &str, content_type: &str) -> Self {
        SubmodelElement::FileAttachment {
            id_short: id_short.into(),
            content_type: content_type.into(),
            digest: None,
            length: 0,
        }
    }

    pub fn id_short(&self) -> &str {
        match self {
            SubmodelElement::Property { id_short, .. }
            | SubmodelElement::Collection { id_short, .. }
            | SubmodelElement::FileAttachment { id_short, .. } => id_short,
        }
    }

    fn validate(&self, depth: usize, path: &str) -> Result<(), ModelError> {
        validate_id_short(self.id_short())?;
        match self {
            SubmodelElement::Property { value_type, value, .. } => {
                if !value_type.accepts(value) {
                    return Err(ModelError::InvalidEntity(format!(
                        "{path}: value {value:?} is not a valid {value_type:?}"
                    )));
                }
            }
            SubmodelElement::Collection { elements, .. } => {
                if depth >= MAX_COLLECTION_DEPTH {
                    return Err(ModelError::InvalidEntity(format!(
                        "{path}: collections nest deeper than {MAX_COLLECTION_DEPTH}"
                    )));
                }
                validate_siblings(elements, depth + 1, path)?;
            }
            SubmodelElement::FileAttachment { digest, length, .. } => {
                if digest.is_none() && *length != 0 {
                    return Err(ModelError::InvalidEntity(format!("{path}: length without digest")));
                }
            }
        }
        Ok(())
    }
}

fn validate_id_short(id_short: &str) -> Result<(), ModelError> {
    let mut chars = id_short.chars();
    let ok = matches!(chars.next(), Some(c) if c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(ModelError::InvalidEntity(format!("invalid idShort {id_short:?}")))
    }
}

fn validate_siblings(elements: &[SubmodelElement], depth: usize, parent: &str) -> Result<(), ModelError> {
    let mut seen = BTreeSet::new();
    for e in elements {
        let path = if parent.is_empty() {
            e.id_short().to_string()
        } else {
            format!("{parent}.{}", e.id_short())
        };
        if !seen.insert(e.id_short()) {
            return Err(ModelError::InvalidEntity(format!("duplicate idShort {path}")));
        }
        e.validate(depth, &path)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Shell {
    pub id: Identifier,
    pub asset_id: Identifier,
    pub id_short: String,
    #[serde(default)]
    pub submodel_refs: Vec<Identifier>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<CloneProvenance>,
    #[serde(default = "first_version")]
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Submodel {
    pub id: Identifier,
    pub id_short: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_id: Option<Identifier>,
    #[serde(default)]
    pub elements: Vec<SubmodelElement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<CloneProvenance>,
    #[serde(default = "first_version")]
    pub version: u64,
}

fn first_version() -> u64 {
    1
}

impl Shell {
    pub fn new(id: Identifier, asset_id: Identifier, id_short: &str) -> Self {
        Shell {
            id,
            asset_id,
            id_short: id_short.into(),
            submodel_refs: Vec::new(),
            provenance: None,
            version: 1,
        }
    }
}

impl Submodel {
    pub fn new(id: Identifier, id_short: &str) -> Self {
        Submodel {
            id,
            id_short: id_short.into(),
            semantic_id: None,
            elements: Vec::new(),
            provenance: None,
            version: 1,
        }
    }

    /// Resolves a dot-separated idShort path through collections.
    pub fn element(&self, path: &str) -> Option<&SubmodelElement> {
        let mut level = &self.elements;
        let mut found = None;
        for part in path.split('.') {
            let e = level.iter().find(|e| e.id_short() == part)?;
            if let SubmodelElement::Collection { elements, .. } = e {
                level = elements;
            } else {
                level = &EMPTY;
            }
            found = Some(e);
        }
        found
    }

    pub fn element_mut(&mut self, path: &str) -> Option<&mut SubmodelElement> {
        let mut parts = path.split('.').peekable();
        let mut level = &mut self.elements;
        loop {
            let part = parts.next()?;
            let e = level.iter_mut().find(|e| e.id_short() == part)?;
            if parts.peek().is_none() {
                return Some(e);
            }
            match e {
                SubmodelElement::Collection { elements, .. } => level = elements,
                _ => return None,
            }
        }
    }
}

static EMPTY: Vec<SubmodelElement> = Vec::new();

/// What the snapshot store and the event envelope call an entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Shell,
    Submodel,
}

pub trait Entity: Serialize + DeserializeOwned + Clone {
    const KIND: EntityKind;

    fn id(&self) -> &Identifier;
    fn version(&self) -> u64;
    fn set_version(&mut self, version: u64);
    fn provenance(&self) -> Option<&CloneProvenance>;
    fn validate(&self) -> Result<(), ModelError>;

    fn canonicalize(&self) -> Result<Vec<u8>, ModelError> {
        self.validate()?;
        let value = serde_json::to_value(self).map_err(|e| ModelError::InvalidEntity(e.to_string()))?;
        Ok(canonical_json(&value))
    }

    fn content_digest(&self) -> Result<Digest, ModelError> {
        Ok(Digest::of(&self.canonicalize()?))
    }

    fn parse_canonical(bytes: &[u8]) -> Result<Self, ModelError> {
        let entity: Self = serde_json::from_slice(bytes).map_err(|e| ModelError::Malformed(e.to_string()))?;
        entity.validate()?;
        Ok(entity)
    }
}

impl Entity for Shell {
    const KIND: EntityKind = EntityKind::Shell;

    fn id(&self) -> &Identifier {
        &self.id
    }
    fn version(&self) -> u64 {
        self.version
    }
    fn set_version(&mut self, version: u64) {
        self.version = version;
    }
    fn provenance(&self) -> Option<&CloneProvenance> {
        self.provenance.as_ref()
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.version == 0 {
            return Err(ModelError::InvalidEntity("version starts at 1".into()));
        }
        if self.id_short.is_empty() {
            return Err(ModelError::InvalidEntity("empty idShort".into()));
        }
        let mut seen = BTreeSet::new();
        for r in &self.submodel_refs {
            if !seen.insert(r) {
                return Err(ModelError::InvalidEntity(format!("duplicate submodel reference {r}")));
            }
        }
        Ok(())
    }
}

impl Entity for Submodel {
    const KIND: EntityKind = EntityKind::Submodel;

    fn id(&self) -> &Identifier {
        &self.id
    }
    fn version(&self) -> u64 {
        self.version
    }
    fn set_version(&mut self, version: u64) {
        self.version = version;
    }
    fn provenance(&self) -> Option<&CloneProvenance> {
        self.provenance.as_ref()
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.version == 0 {
            return Err(ModelError::InvalidEntity("version starts at 1".into()));
        }
        validate_id_short(&self.id_short)?;
        validate_siblings(&self.elements, 1, "")
    }
}

/// Canonical JSON: sorted keys, no whitespace, NFC strings, serde_json's
/// shortest round-trip number rendering.
pub fn canonical_json(value: &Value) -> Vec<u8> {
    let mut out = Vec::with_capacity(256);
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut Vec<u8>) {
    match value {
        Value::Null | Value::Bool(_) | Value::Number(_) => {
            out.extend_from_slice(value.to_string().as_bytes());
        }
        Value::String(s) => write_string(s, out),
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_canonical(item, out);
            }
            out.push(b']');
        }
        Value::Object(map) => {
            let mut entries: Vec<(String, &Value)> = map.iter().map(|(k, v)| (k.nfc().collect(), v)).collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            out.push(b'{');
            for (i, (k, v)) in entries.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_string(k, out);
                out.push(b':');
                write_canonical(v, out);
            }
            out.push(b'}');
        }
    }
}

fn write_string(s: &str, out: &mut Vec<u8>) {
    let normalized: String = s.nfc().collect();
    // serde_json's string escaping is deterministic.
    out.extend_from_slice(serde_json::to_string(&normalized).expect("string serializes").as_bytes());
}
