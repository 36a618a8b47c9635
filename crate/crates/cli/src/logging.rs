//! Two sinks: human-readable lines on stderr (filtered by `RUST_LOG`, default
//! `info`) and a JSONL event file that receives every info-or-higher record
//! plus explicit structured events.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Mutex, OnceLock};
use std::time::{SystemTime, UNIX_EPOCH};

use log::{Level, LevelFilter, Log, Metadata, Record};
use serde_json::{json, Map, Value};

struct EventLogger {
    human: env_logger::Logger,
    events: Option<Mutex<BufWriter<File>>>,
}

static LOGGER: OnceLock<EventLogger> = OnceLock::new();

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl EventLogger {
    fn write(&self, value: &Value) {
        if let Some(events) = &self.events {
            let mut w = events.lock().unwrap_or_else(|p| p.into_inner());
            // a failing log sink must not fail the command
            let _ = writeln!(w, "{value}");
            let _ = w.flush();
        }
    }
}

impl Log for EventLogger {
    fn enabled(&self, meta: &Metadata<'_>) -> bool {
        meta.level() <= Level::Info || self.human.enabled(meta)
    }

    fn log(&self, record: &Record<'_>) {
        if self.human.matches(record) {
            self.human.log(record);
        }
        if record.level() <= Level::Info {
            self.write(&json!({
                "ts": now(),
                "event": "log",
                "level": record.level().as_str(),
                "target": record.target(),
                "message": record.args().to_string(),
            }));
        }
    }

    fn flush(&self) {
        self.human.flush();
        if let Some(events) = &self.events {
            let _ = events.lock().unwrap_or_else(|p| p.into_inner()).flush();
        }
    }
}

/// Install the logger. Events go to `events_path` when it can be opened.
pub fn init(events_path: Option<&Path>) {
    let human = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .build();
    let max = human.filter().max(LevelFilter::Info);
    let events = events_path.and_then(|p| {
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)
            .map_err(|e| eprintln!("warning: cannot open event log {}: {e}", p.display()))
            .ok()
            .map(|f| Mutex::new(BufWriter::new(f)))
    });
    if LOGGER.set(EventLogger { human, events }).is_ok() {
        if let Some(logger) = LOGGER.get() {
            if log::set_logger(logger).is_ok() {
                log::set_max_level(max);
            }
        }
    }
}

/// Record a structured event; `fields` must be a JSON object.
pub fn event(name: &str, fields: Value) {
    let Some(logger) = LOGGER.get() else { return };
    let mut obj = Map::new();
    obj.insert("ts".into(), json!(now()));
    obj.insert("event".into(), json!(name));
    if let Value::Object(extra) = fields {
        obj.extend(extra);
    }
    logger.write(&Value::Object(obj));
}
