//! Protocol fuzzing against a running device server.
//!
//! Sends a mix of well-formed requests, batches and garbage over one
//! connection and checks that every answer is accounted for.

use std::collections::HashSet;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde_json::{json, Value};

use crate::protocol::PROTOCOL_VERSION;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FuzzReport {
    pub lines: usize,
    pub well_formed: usize,
    pub malformed: usize,
    /// Well-formed requests answered exactly once with their id.
    pub answered: usize,
    pub duplicate_answers: usize,
    pub missing_answers: usize,
    /// Malformed requests with a recoverable id that got an error object
    /// carrying that id.
    pub malformed_with_id: usize,
    pub malformed_with_id_answered: usize,
    /// Responses that were not valid JSON or had the wrong shape.
    pub bad_responses: usize,
    /// Bits outside {0,1}, wrong length, or nonzero for a zero input.
    pub invalid_bits: usize,
}

impl FuzzReport {
    pub fn passed(&self) -> bool {
        self.answered == self.well_formed
            && self.duplicate_answers == 0
            && self.missing_answers == 0
            && self.malformed_with_id_answered == self.malformed_with_id
            && self.bad_responses == 0
            && self.invalid_bits == 0
    }
}

#[derive(Debug, Clone)]
enum Item {
    Good { id: u64, input: u8, samples: u32 },
    /// Bad request whose id the server can still read.
    BadWithId(u64),
    Bad,
}

fn good<R: Rng>(rng: &mut R, id: u64) -> (Value, Item) {
    let input = rng.random_range(0..=1u8);
    let samples = rng.random_range(1..=16u32);
    let field: f64 = match rng.random_range(0..4) {
        0 => rng.random_range(-50.0..50.0),
        1 => 1e6,
        2 => -1e6,
        _ => rng.random_range(0.0..10.0),
    };
    let value = json!({"v": PROTOCOL_VERSION, "id": id, "field_mT": field, "input": input, "samples": samples});
    (value, Item::Good { id, input, samples })
}

fn bad_with_id<R: Rng>(rng: &mut R, id: u64) -> (Value, Item) {
    let value = match rng.random_range(0..6) {
        0 => json!({"v": 1, "id": id, "field_mT": 4.0, "input": 2, "samples": 3}),
        1 => json!({"v": 1, "id": id, "field_mT": 4.0, "input": 1, "samples": 0}),
        2 => json!({"v": 1, "id": id, "input": 1, "samples": 3}),
        3 => json!({"v": 1, "id": id, "field_mT": "high", "input": 1, "samples": 3}),
        4 => json!({"id": id, "field_mT": 4.0, "input": 1, "samples": 3}),
        _ => json!({"v": 1, "id": id, "field_mT": 4.0, "input": 1, "samples": -4}),
    };
    (value, Item::BadWithId(id))
}

fn garbage<R: Rng>(rng: &mut R) -> String {
    let choices = [
        "{",
        "}",
        "null",
        "42",
        "\"text\"",
        "{\"v\":1,\"id\":",
        "[{\"v\":1,",
        "not json at all",
        "{\"v\":1,\"id\":-3,\"field_mT\":1,\"input\":1,\"samples\":1}",
        "{\"v\":1,\"id\":1.5,\"field_mT\":1,\"input\":1,\"samples\":1}",
        "\u{fffd}\u{fffd}",
    ];
    let mut s = choices.choose(rng).expect("non-empty").to_string();
    if rng.random_bool(0.3) {
        let len = rng.random_range(1..40);
        s.extend((0..len).map(|_| rng.random_range(b' '..=b'~') as char));
    }
    s
}

/// Sends `lines` random lines and checks the replies.
pub fn fuzz_server<R: Rng>(addr: SocketAddr, lines: usize, rng: &mut R) -> io::Result<FuzzReport> {
    let stream = TcpStream::connect_timeout(&addr, Duration::from_secs(5))?;
    stream.set_read_timeout(Some(Duration::from_secs(30)))?;
    stream.set_nodelay(true)?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut report = FuzzReport::default();
    let mut next_id = 0u64;
    let mut fresh = || {
        next_id += 1;
        next_id
    };

    for _ in 0..lines {
        report.lines += 1;
        let (line, items, is_batch) = match rng.random_range(0..10) {
            0..=4 => {
                let (v, item) = good(rng, fresh());
                (v.to_string(), vec![item], false)
            }
            5 | 6 => {
                let (v, item) = bad_with_id(rng, fresh());
                (v.to_string(), vec![item], false)
            }
            7 => (garbage(rng), vec![Item::Bad], false),
            _ => {
                let n = rng.random_range(0..6);
                let mut values = Vec::new();
                let mut items = Vec::new();
                for _ in 0..n {
                    let (v, item) = if rng.random_bool(0.75) {
                        good(rng, fresh())
                    } else {
                        bad_with_id(rng, fresh())
                    };
                    values.push(v);
                    items.push(item);
                }
                (Value::Array(values).to_string(), items, true)
            }
        };
        for item in &items {
            match item {
                Item::Good { .. } => report.well_formed += 1,
                Item::BadWithId(_) => {
                    report.malformed += 1;
                    report.malformed_with_id += 1;
                }
                Item::Bad => report.malformed += 1,
            }
        }
        writer.write_all(format!("{line}\n").as_bytes())?;

        let mut reply = String::new();
        if reader.read_line(&mut reply)? == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "server hung up"));
        }
        let Ok(value) = serde_json::from_str::<Value>(&reply) else {
            report.bad_responses += 1;
            continue;
        };
        let responses = match (is_batch, value) {
            (true, Value::Array(v)) => v,
            (false, v @ Value::Object(_)) => vec![v],
            _ => {
                report.bad_responses += 1;
                continue;
            }
        };
        check_replies(&items, &responses, &mut report);
    }
    Ok(report)
}

fn check_replies(items: &[Item], responses: &[Value], report: &mut FuzzReport) {
    let mut seen = HashSet::new();
    for r in responses {
        if r.get("v").and_then(Value::as_u64) != Some(u64::from(PROTOCOL_VERSION)) {
            report.bad_responses += 1;
        }
        if let Some(id) = r.get("id").and_then(Value::as_u64) {
            if !seen.insert(id) {
                report.duplicate_answers += 1;
            }
        }
    }
    if items.len() != responses.len() && !matches!(items, [Item::Bad]) {
        report.missing_answers += items.len().abs_diff(responses.len());
    }
    for item in items {
        match *item {
            Item::Good { id, input, samples } => {
                let found: Vec<&Value> = responses
                    .iter()
                    .filter(|r| r.get("id").and_then(Value::as_u64) == Some(id))
                    .collect();
                match found.as_slice() {
                    [r] => match r.get("bits").and_then(Value::as_array) {
                        Some(bits) => {
                            report.answered += 1;
                            let ok = bits.len() == samples as usize
                                && bits.iter().all(|b| {
                                    matches!(b.as_u64(), Some(0) | Some(1))
                                        && (input == 1 || b.as_u64() == Some(0))
                                });
                            if !ok {
                                report.invalid_bits += 1;
                            }
                        }
                        None => report.bad_responses += 1,
                    },
                    [] => report.missing_answers += 1,
                    _ => {}
                }
            }
            Item::BadWithId(id) => {
                let answered = responses.iter().any(|r| {
                    r.get("id").and_then(Value::as_u64) == Some(id)
                        && r.get("error").and_then(Value::as_str).is_some()
                });
                if answered {
                    report.malformed_with_id_answered += 1;
                }
            }
            Item::Bad => {
                if responses.len() != 1 || responses[0].get("error").is_none() {
                    report.bad_responses += 1;
                }
            }
        }
    }
}
