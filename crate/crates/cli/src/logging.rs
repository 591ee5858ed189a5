//! JSON-lines logging on stderr. `QENET_LOG` sets the filter (default `info`).
//!
//! A message that is itself a JSON object is merged into the line, so
//! structured events keep their fields at the top level.

use std::io::Write;

use serde_json::{json, Value};

pub const LOG_ENV: &str = "QENET_LOG";

pub fn init() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "info");
    let _ = env_logger::Builder::from_env(env)
        .format(|buf, record| {
            let mut line = json!({
                "ts": buf.timestamp_millis().to_string(),
                "level": record.level().as_str(),
                "target": record.target(),
            });
            let msg = record.args().to_string();
            match serde_json::from_str::<Value>(&msg) {
                Ok(Value::Object(fields)) => line.as_object_mut().expect("object").extend(fields),
                _ => {
                    line["msg"] = Value::String(msg);
                }
            }
            writeln!(buf, "{line}")
        })
        .try_init();
}

pub fn event(event: &str, fields: Value) {
    let mut v = json!({ "event": event });
    if let Value::Object(src) = fields {
        v.as_object_mut().expect("object").extend(src);
    }
    log::info!("{v}");
}

pub fn warn(event: &str, message: &str) {
    log::warn!("{}", json!({ "event": event, "msg": message }));
}
