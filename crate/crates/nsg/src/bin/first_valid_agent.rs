//! Minimal external agent speaking the stdin/stdout wire protocol: for each
//! decision request it replies with the first offered valid action.
//!
//! Serves as a reference implementation of the adapter protocol used to
//! plug out-of-process (e.g. LLM-backed) agents into the evaluator:
//! one JSON request per line in, one JSON reply per line out.

use std::io::{self, BufRead, Write};

fn main() -> io::Result<()> {
    let stdin = io::stdin();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(_) => continue,
        };
        // episode_end notifications carry an "event" field and need no reply
        if value.get("event").is_some() {
            continue;
        }
        writeln!(out, "{}", serde_json::json!({ "choice": 0 }))?;
        out.flush()?;
    }
    Ok(())
}
