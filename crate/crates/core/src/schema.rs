//! Packet schemas: which fields a record has, how each is turned into a
//! digit string, and the sequence geometry (`seq_len`, `max_numeric_len`).
//!
//! Schemas are stored as TOML. See the repository README for the grammar.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("failed to read schema {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse schema: {0}")]
    Parse(String),
    #[error("unsupported schema_version {found} (expected {SCHEMA_VERSION})")]
    Version { found: u32 },
    #[error("invalid schema: {0}")]
    Invalid(String),
}

/// How a raw cell becomes a non-negative integer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldKind {
    /// Plain base-10 integer text.
    Integer,
    /// Decimal text multiplied by `10^scale` and rounded half-to-even.
    FixedPoint { scale: u32 },
    /// Values looked up in a code table. With `hex = true` the table is the
    /// implicit hexadecimal reading of the cell (`0x316` or `316` -> 790).
    Categorical {
        #[serde(default)]
        codes: BTreeMap<String, u64>,
        #[serde(default)]
        hex: bool,
    },
}

impl FieldKind {
    pub fn is_numeric(&self) -> bool {
        !matches!(self, FieldKind::Categorical { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDescriptor {
    pub name: String,
    /// CSV column holding the field; defaults to `name`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    #[serde(flatten)]
    pub kind: FieldKind,
    pub max_digits: usize,
}

impl FieldDescriptor {
    pub fn integer(name: &str, max_digits: usize) -> Self {
        Self {
            name: name.to_string(),
            column: None,
            kind: FieldKind::Integer,
            max_digits,
        }
    }

    pub fn fixed_point(name: &str, scale: u32, max_digits: usize) -> Self {
        Self {
            name: name.to_string(),
            column: None,
            kind: FieldKind::FixedPoint { scale },
            max_digits,
        }
    }

    pub fn categorical(name: &str, codes: BTreeMap<String, u64>, max_digits: usize) -> Self {
        Self {
            name: name.to_string(),
            column: None,
            kind: FieldKind::Categorical { codes, hex: false },
            max_digits,
        }
    }

    pub fn hex(name: &str, max_digits: usize) -> Self {
        Self {
            name: name.to_string(),
            column: None,
            kind: FieldKind::Categorical {
                codes: BTreeMap::new(),
                hex: true,
            },
            max_digits,
        }
    }

    pub fn with_column(mut self, column: &str) -> Self {
        self.column = Some(column.to_string());
        self
    }

    pub fn column_name(&self) -> &str {
        self.column.as_deref().unwrap_or(&self.name)
    }
}

fn default_label_column() -> String {
    "label".to_string()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketSchema {
    pub schema_version: u32,
    /// Maximum sequence length L.
    pub seq_len: usize,
    /// Maximum numeric length M (rows of the numeric-position table).
    pub max_numeric_len: usize,
    #[serde(default = "default_label_column")]
    pub label_column: String,
    pub label_names: Vec<String>,
    /// Raw label cell -> class name, for datasets whose label text differs
    /// from `label_names`. Unmapped cells are matched against `label_names`.
    #[serde(default)]
    pub label_map: BTreeMap<String, String>,
    pub fields: Vec<FieldDescriptor>,
}

impl PacketSchema {
    pub fn new(fields: Vec<FieldDescriptor>, label_names: Vec<String>, seq_len: usize, max_numeric_len: usize) -> Result<Self, SchemaError> {
        let schema = Self {
            schema_version: SCHEMA_VERSION,
            seq_len,
            max_numeric_len,
            label_column: default_label_column(),
            label_names,
            label_map: BTreeMap::new(),
            fields,
        };
        schema.validate()?;
        Ok(schema)
    }

    /// Number of data fields (n - 1).
    pub fn field_count(&self) -> usize {
        self.fields.len()
    }

    /// Number of classes K.
    pub fn class_count(&self) -> usize {
        self.label_names.len()
    }

    /// Σ max_digits + one separator per field + the label token.
    pub fn worst_case_tokens(&self) -> usize {
        self.fields.iter().map(|f| f.max_digits).sum::<usize>() + self.fields.len() + 1
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.label_names.iter().position(|n| n == name)
    }

    /// Resolves a raw label cell through `label_map` and `label_names`.
    pub fn resolve_label(&self, raw: &str) -> Option<usize> {
        let raw = raw.trim();
        match self.label_map.get(raw) {
            Some(mapped) => self.class_id(mapped),
            None => self.class_id(raw),
        }
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        let invalid = |msg: String| Err(SchemaError::Invalid(msg));
        if self.schema_version != SCHEMA_VERSION {
            return Err(SchemaError::Version {
                found: self.schema_version,
            });
        }
        if self.fields.is_empty() {
            return invalid("at least one data field is required".into());
        }
        if self.label_names.is_empty() {
            return invalid("at least one label name is required".into());
        }
        let unique: BTreeSet<_> = self.label_names.iter().collect();
        if unique.len() != self.label_names.len() {
            return invalid("label names must be distinct".into());
        }
        if self.max_numeric_len == 0 {
            return invalid("max_numeric_len must be positive".into());
        }
        let mut names = BTreeSet::new();
        for f in &self.fields {
            if !names.insert(f.name.as_str()) {
                return invalid(format!("duplicate field name {:?}", f.name));
            }
            if f.max_digits == 0 || f.max_digits > self.max_numeric_len {
                return invalid(format!(
                    "field {:?}: max_digits {} must be in 1..={}",
                    f.name, f.max_digits, self.max_numeric_len
                ));
            }
            if let FieldKind::Categorical { codes, hex } = &f.kind {
                if *hex && !codes.is_empty() {
                    return invalid(format!("field {:?}: hex and an explicit code table are exclusive", f.name));
                }
                if !*hex && codes.is_empty() {
                    return invalid(format!("field {:?}: categorical field needs codes or hex = true", f.name));
                }
                let distinct: BTreeSet<_> = codes.values().collect();
                if distinct.len() != codes.len() {
                    return invalid(format!("field {:?}: code table is not injective", f.name));
                }
                if let Some((raw, code)) = codes.iter().find(|(_, c)| c.to_string().len() > f.max_digits) {
                    return invalid(format!(
                        "field {:?}: code {code} for {raw:?} exceeds max_digits {}",
                        f.name, f.max_digits
                    ));
                }
            }
        }
        for (raw, mapped) in &self.label_map {
            if self.class_id(mapped).is_none() {
                return invalid(format!("label_map entry {raw:?} -> {mapped:?} names an unknown class"));
            }
        }
        if self.worst_case_tokens() > self.seq_len {
            return invalid(format!(
                "worst-case token count {} exceeds seq_len {}",
                self.worst_case_tokens(),
                self.seq_len
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SchemaError> {
        let schema: Self = toml::from_str(text).map_err(|e| SchemaError::Parse(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn to_toml_string(&self) -> Result<String, SchemaError> {
        toml::to_string(self).map_err(|e| SchemaError::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SchemaError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| SchemaError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SchemaError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string()?).map_err(|source| SchemaError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}
