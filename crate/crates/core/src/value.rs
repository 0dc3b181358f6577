//! Canonical structured values.
//!
//! Every file and wire message in the toolkit is built from [`CanonValue`].
//! The encoding is JSON text with map keys in ascending byte order and no
//! whitespace, so two equal values always produce identical bytes and the
//! bytes can be hashed.

use std::collections::BTreeMap;
use std::fmt;

use serde::ser::{SerializeMap, SerializeSeq};
use serde::{Serialize, Serializer};
use thiserror::Error;

/// A structured value without floating point numbers.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum CanonValue {
    #[default]
    Null,
    Bool(bool),
    Int(i64),
    Str(String),
    List(Vec<CanonValue>),
    Map(BTreeMap<String, CanonValue>),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("floating point literal not allowed: {0}")]
    Float(String),
    #[error("integer out of 64-bit signed range: {0}")]
    Overflow(String),
}

impl CanonValue {
    pub fn map<K, I>(entries: I) -> Self
    where
        K: Into<String>,
        I: IntoIterator<Item = (K, CanonValue)>,
    {
        CanonValue::Map(entries.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }

    pub fn list<I: IntoIterator<Item = CanonValue>>(items: I) -> Self {
        CanonValue::List(items.into_iter().collect())
    }

    pub fn is_null(&self) -> bool {
        matches!(self, CanonValue::Null)
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            CanonValue::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            CanonValue::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            CanonValue::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[CanonValue]> {
        match self {
            CanonValue::List(l) => Some(l),
            _ => None,
        }
    }

    pub fn as_map(&self) -> Option<&BTreeMap<String, CanonValue>> {
        match self {
            CanonValue::Map(m) => Some(m),
            _ => None,
        }
    }

    /// Looks up `key` when this value is a map.
    pub fn get(&self, key: &str) -> Option<&CanonValue> {
        self.as_map().and_then(|m| m.get(key))
    }

    pub fn encode(&self) -> Vec<u8> {
        canon_encode(self)
    }

    pub fn encode_string(&self) -> String {
        // serde_json only ever emits valid UTF-8
        String::from_utf8(canon_encode(self)).expect("canonical encoding is UTF-8")
    }
}

impl fmt::Display for CanonValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.encode_string())
    }
}

impl From<bool> for CanonValue {
    fn from(b: bool) -> Self {
        CanonValue::Bool(b)
    }
}

impl From<i64> for CanonValue {
    fn from(i: i64) -> Self {
        CanonValue::Int(i)
    }
}

impl From<u32> for CanonValue {
    fn from(i: u32) -> Self {
        CanonValue::Int(i64::from(i))
    }
}

impl From<&str> for CanonValue {
    fn from(s: &str) -> Self {
        CanonValue::Str(s.to_owned())
    }
}

impl From<String> for CanonValue {
    fn from(s: String) -> Self {
        CanonValue::Str(s)
    }
}

impl<T: Into<CanonValue>> From<Option<T>> for CanonValue {
    fn from(v: Option<T>) -> Self {
        v.map_or(CanonValue::Null, Into::into)
    }
}

impl Serialize for CanonValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            CanonValue::Null => serializer.serialize_unit(),
            CanonValue::Bool(b) => serializer.serialize_bool(*b),
            CanonValue::Int(i) => serializer.serialize_i64(*i),
            CanonValue::Str(s) => serializer.serialize_str(s),
            CanonValue::List(items) => {
                let mut seq = serializer.serialize_seq(Some(items.len()))?;
                for item in items {
                    seq.serialize_element(item)?;
                }
                seq.end()
            }
            // BTreeMap<String, _> iterates in byte order of the UTF-8 keys.
            CanonValue::Map(entries) => {
                let mut map = serializer.serialize_map(Some(entries.len()))?;
                for (k, v) in entries {
                    map.serialize_entry(k, v)?;
                }
                map.end()
            }
        }
    }
}

/// Canonical bytes of `v`: compact JSON, sorted keys, decimal integers.
///
/// Strings use serde_json's escape table: `"` `\\` and the short forms
/// `\b \f \n \r \t`, other control characters as `\u00XX`, everything
/// else (including non-ASCII) verbatim.
pub fn canon_encode(v: &CanonValue) -> Vec<u8> {
    serde_json::to_vec(v).expect("CanonValue serialization is infallible")
}

/// Parses bytes into a value, re-canonicalizing map key order.
pub fn canon_decode(bytes: &[u8]) -> Result<CanonValue, ParseError> {
    let raw: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| ParseError::Malformed(e.to_string()))?;
    from_json(raw)
}

pub fn canon_decode_str(s: &str) -> Result<CanonValue, ParseError> {
    canon_decode(s.as_bytes())
}

fn from_json(raw: serde_json::Value) -> Result<CanonValue, ParseError> {
    use serde_json::Value;
    Ok(match raw {
        Value::Null => CanonValue::Null,
        Value::Bool(b) => CanonValue::Bool(b),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                CanonValue::Int(i)
            } else if n.is_u64() {
                return Err(ParseError::Overflow(n.to_string()));
            } else {
                return Err(ParseError::Float(n.to_string()));
            }
        }
        Value::String(s) => CanonValue::Str(s),
        Value::Array(items) => {
            CanonValue::List(items.into_iter().map(from_json).collect::<Result<_, _>>()?)
        }
        Value::Object(entries) => CanonValue::Map(
            entries
                .into_iter()
                .map(|(k, v)| Ok((k, from_json(v)?)))
                .collect::<Result<_, ParseError>>()?,
        ),
    })
}
