//! JSON-lines records.

use std::fs::OpenOptions;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use serde_json::{Map, Value};

pub const SCHEMA_VERSION: u32 = 1;
pub const VERSION: &str = env!("POLARON_VERSION");

pub struct Emitter {
    sink: Box<dyn Write>,
    seed: Option<u64>,
    started: Instant,
}

impl Emitter {
    pub fn open(out: Option<&Path>, seed: Option<u64>) -> io::Result<Self> {
        let sink: Box<dyn Write> = match out {
            Some(p) => Box::new(BufWriter::new(OpenOptions::new().create(true).append(true).open(p)?)),
            None => Box::new(BufWriter::new(io::stdout())),
        };
        Ok(Self { sink, seed, started: Instant::now() })
    }

    /// Writes `payload` under `record` with the common header fields.
    pub fn emit<T: Serialize>(&mut self, record: &str, payload: &T) -> io::Result<()> {
        let mut obj = Map::new();
        obj.insert("schema_version".into(), SCHEMA_VERSION.into());
        obj.insert("record".into(), record.into());
        obj.insert("version".into(), VERSION.into());
        obj.insert("seed".into(), self.seed.map_or(Value::Null, Value::from));
        obj.insert("wall_time".into(), self.started.elapsed().as_secs_f64().into());
        obj.insert("data".into(), serde_json::to_value(payload).map_err(io::Error::other)?);
        serde_json::to_writer(&mut self.sink, &Value::Object(obj)).map_err(io::Error::other)?;
        self.sink.write_all(b"\n")?;
        self.sink.flush()
    }
}
