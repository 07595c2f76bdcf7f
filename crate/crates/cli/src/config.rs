//! TOML experiment files. Command-line flags are written into the parsed table before
//! it is deserialised, so a flag always wins over the file.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use toml::{Table, Value};

use crate::run::{usage, CliResult};

pub fn load_table(path: Option<&Path>) -> CliResult<Table> {
    match path {
        None => Ok(Table::new()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            text.parse::<Table>()
                .map_err(|e| usage(format!("{}: {e}", p.display())))
        }
    }
}

/// Sets `section.key` (or a top-level `key` when `section` is empty) if `value` is present.
pub fn set(table: &mut Table, section: &str, key: &str, value: Option<impl Into<Value>>) -> CliResult<()> {
    let Some(value) = value else {
        return Ok(());
    };
    let target = if section.is_empty() {
        table
    } else {
        table
            .entry(section)
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| usage(format!("`{section}` must be a table")))?
    };
    target.insert(key.to_owned(), value.into());
    Ok(())
}

pub fn list(values: Option<Vec<f64>>) -> Option<Value> {
    values.map(|v| Value::Array(v.into_iter().map(Value::Float).collect()))
}

pub fn decode<T: DeserializeOwned>(table: Table) -> CliResult<T> {
    T::deserialize(Value::Table(table)).map_err(|e| usage(format!("configuration: {e}")))
}
