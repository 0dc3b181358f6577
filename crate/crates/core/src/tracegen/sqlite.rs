//! Imports a state graph from a relational dump.
//!
//! Expected tables:
//!
//! ```sql
//! CREATE TABLE state (id INTEGER NOT NULL, json TEXT NOT NULL);
//! CREATE TABLE transition (from_id INTEGER, action_json TEXT, to_id INTEGER);
//! ```
//!
//! `state.json` is a state record exactly as it appears in a graph file and
//! `transition.action_json` is the action object of a transition record.
//! Rows are read in `rowid` order so the resulting graph is deterministic.

use std::path::Path;

use rusqlite::{Connection, OpenFlags};

use crate::model::{Action, State, StateGraph, StateId, Transition};
use crate::value::{canon_decode_str, CanonValue};

use super::FileError;

fn err(msg: impl Into<String>) -> FileError {
    FileError::Format { line: 0, msg: msg.into() }
}

pub fn import_sqlite(path: &Path, model: &str) -> Result<StateGraph, FileError> {
    if !path.exists() {
        return Err(FileError::Io {
            path: path.to_owned(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "database not found"),
        });
    }
    let db = Connection::open_with_flags(path, OpenFlags::SQLITE_OPEN_READ_ONLY).map_err(|e| err(e.to_string()))?;
    let mut graph = StateGraph::new(model);

    let mut stmt = db.prepare("SELECT id, json FROM state ORDER BY rowid").map_err(|e| err(e.to_string()))?;
    let rows = stmt
        .query_map([], |row| Ok((row.get::<_, i64>(0)?, row.get::<_, String>(1)?)))
        .map_err(|e| err(e.to_string()))?;
    for row in rows {
        let (id, json) = row.map_err(|e| err(e.to_string()))?;
        let rec = canon_decode_str(&json).map_err(|e| err(format!("state {id}: {e}")))?;
        let vars = rec.get("vars").ok_or_else(|| err(format!("state {id}: missing vars")))?;
        let state = State::from_value(vars).map_err(|e| err(e.to_string()))?;
        let (actual, _) = graph.insert_state(state).map_err(|e| err(e.to_string()))?;
        if actual != StateId(id as u64) {
            return Err(err(format!("state {id}: id does not match content hash {actual}")));
        }
        if rec.get("initial").and_then(CanonValue::as_bool) == Some(true) {
            graph.mark_initial(actual).map_err(|e| err(e.to_string()))?;
        }
    }

    let mut stmt = db
        .prepare("SELECT from_id, action_json, to_id FROM transition ORDER BY rowid")
        .map_err(|e| err(e.to_string()))?;
    let rows = stmt
        .query_map([], |row| Ok((row.get::<_, i64>(0)?, row.get::<_, String>(1)?, row.get::<_, i64>(2)?)))
        .map_err(|e| err(e.to_string()))?;
    for row in rows {
        let (from, action, to) = row.map_err(|e| err(e.to_string()))?;
        let action = canon_decode_str(&action).map_err(|e| err(e.to_string()))?;
        let t = Transition {
            from: StateId(from as u64),
            action: Action::from_value(&action).map_err(|e| err(e.to_string()))?,
            to: StateId(to as u64),
        };
        graph.add_transition(t).map_err(|e| err(e.to_string()))?;
    }
    Ok(graph)
}
