use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One-line result of a protocol run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub protocol: String,
    pub checkpoint_hash: String,
    pub metric: String,
    pub value: f64,
}

impl Summary {
    pub fn new(protocol: &str, checkpoint_hash: &str, metric: &str, value: f64) -> Self {
        Self { protocol: protocol.into(), checkpoint_hash: checkpoint_hash.into(), metric: metric.into(), value }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("plain struct serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
