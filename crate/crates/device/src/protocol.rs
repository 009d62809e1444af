//! Wire format: newline-delimited JSON, one request object or one array of
//! requests per line, answered by one line of the same shape.
//!
//! ```text
//! -> {"v":1,"id":7,"field_mT":4.2,"input":1,"samples":3}
//! <- {"v":1,"id":7,"bits":[0,1,1]}
//! -> [{"v":1,"id":8,...},{"v":1,"id":9,...}]
//! <- [{"v":1,"id":8,"bits":[..]},{"v":1,"id":9,"error":"..."}]
//! ```

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::trace::KerrTrace;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynapseRequest {
    pub v: u32,
    pub id: u64,
    #[serde(rename = "field_mT")]
    pub field_mt: f64,
    pub input: u8,
    pub samples: u32,
    /// Ask for the Kerr traces behind each bit (trace mode only).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub traces: bool,
}

impl SynapseRequest {
    pub fn new(id: u64, field_mt: f64, input: u8, samples: u32) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            id,
            field_mt,
            input,
            samples,
            traces: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynapseResponse {
    pub v: u32,
    /// `None` only when the request was too malformed to recover an id.
    pub id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traces: Option<Vec<KerrTrace>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SynapseResponse {
    pub fn bits(id: u64, bits: Vec<u8>) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            id: Some(id),
            bits: Some(bits),
            traces: None,
            error: None,
        }
    }

    pub fn error(id: Option<u64>, message: impl Into<String>) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            id,
            bits: None,
            traces: None,
            error: Some(message.into()),
        }
    }
}

/// One decoded line.
#[derive(Debug, Clone, PartialEq)]
pub enum Incoming {
    Single(Parsed),
    Batch(Vec<Parsed>),
}

/// Outcome of decoding a single request object.
#[derive(Debug, Clone, PartialEq)]
pub enum Parsed {
    Request(SynapseRequest),
    /// Well-formed JSON with a version other than ours.
    WrongVersion { id: Option<u64>, version: Value },
    Malformed { id: Option<u64>, reason: String },
}

impl Parsed {
    fn from_value(value: Value) -> Self {
        let id = value.get("id").and_then(Value::as_u64);
        match value.get("v") {
            Some(v) if v.as_u64() != Some(u64::from(PROTOCOL_VERSION)) => {
                return Parsed::WrongVersion {
                    id,
                    version: v.clone(),
                };
            }
            None if value.is_object() => {
                return Parsed::Malformed {
                    id,
                    reason: "missing protocol version \"v\"".into(),
                };
            }
            _ => {}
        }
        match serde_json::from_value::<SynapseRequest>(value) {
            Ok(req) => Parsed::Request(req),
            Err(e) => Parsed::Malformed {
                id,
                reason: e.to_string(),
            },
        }
    }
}

/// Decodes one line. Invalid JSON becomes a single malformed request.
pub fn parse_line(line: &[u8]) -> Incoming {
    match serde_json::from_slice::<Value>(line) {
        Ok(Value::Array(items)) => Incoming::Batch(items.into_iter().map(Parsed::from_value).collect()),
        Ok(value) => Incoming::Single(Parsed::from_value(value)),
        Err(e) => Incoming::Single(Parsed::Malformed {
            id: None,
            reason: format!("invalid JSON: {e}"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_wire_names() {
        let req = SynapseRequest::new(7, 4.2, 1, 3);
        let text = serde_json::to_string(&req).unwrap();
        assert_eq!(text, r#"{"v":1,"id":7,"field_mT":4.2,"input":1,"samples":3}"#);
        assert_eq!(parse_line(text.as_bytes()), Incoming::Single(Parsed::Request(req)));
    }

    #[test]
    fn response_omits_absent_parts() {
        let ok = serde_json::to_string(&SynapseResponse::bits(3, vec![1, 0])).unwrap();
        assert_eq!(ok, r#"{"v":1,"id":3,"bits":[1,0]}"#);
        let err = serde_json::to_string(&SynapseResponse::error(None, "bad")).unwrap();
        assert_eq!(err, r#"{"v":1,"id":null,"error":"bad"}"#);
    }

    #[test]
    fn batches_decode_element_wise() {
        let line = br#"[{"v":1,"id":1,"field_mT":1,"input":0,"samples":2},{"v":1,"id":2,"input":1}]"#;
        let Incoming::Batch(items) = parse_line(line) else {
            panic!("not a batch")
        };
        assert!(matches!(items[0], Parsed::Request(_)));
        assert!(matches!(items[1], Parsed::Malformed { id: Some(2), .. }));
    }

    #[test]
    fn version_and_garbage() {
        assert!(matches!(
            parse_line(br#"{"v":2,"id":5}"#),
            Incoming::Single(Parsed::WrongVersion { id: Some(5), .. })
        ));
        assert!(matches!(
            parse_line(br#"{"id":5,"field_mT":1,"input":1,"samples":1}"#),
            Incoming::Single(Parsed::Malformed { id: Some(5), .. })
        ));
        assert!(matches!(
            parse_line(b"{not json"),
            Incoming::Single(Parsed::Malformed { id: None, .. })
        ));
        assert!(matches!(
            parse_line(b"42"),
            Incoming::Single(Parsed::Malformed { id: None, .. })
        ));
    }
}
