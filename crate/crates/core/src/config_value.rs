//! Typed access to configuration values.

use toml::Value;

use crate::error::{Error, Result};

fn wrong(key: &str, want: &str, v: &Value) -> Error {
    Error::Config(format!("`{key}` expects {want}, got `{v}`"))
}

pub fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| wrong(key, "true or false", v))
}

pub fn as_u64(key: &str, v: &Value) -> Result<u64> {
    v.as_integer()
        .and_then(|i| u64::try_from(i).ok())
        .ok_or_else(|| wrong(key, "a non-negative integer", v))
}

pub fn as_usize(key: &str, v: &Value) -> Result<usize> {
    Ok(as_u64(key, v)? as usize)
}

pub fn as_u32(key: &str, v: &Value) -> Result<u32> {
    u32::try_from(as_u64(key, v)?).map_err(|_| wrong(key, "a 32-bit integer", v))
}

pub fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(wrong(key, "a number", v)),
    }
}

pub fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| wrong(key, "a string", v))
}

pub fn as_parsed<T: std::str::FromStr<Err = Error>>(key: &str, v: &Value) -> Result<T> {
    as_str(key, v)?.parse().map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("`{key}`: {m}")),
        other => other,
    })
}

pub fn as_list<T>(key: &str, v: &Value, f: impl Fn(&str, &Value) -> Result<T>) -> Result<Vec<T>> {
    v.as_array()
        .ok_or_else(|| wrong(key, "a list", v))?
        .iter()
        .map(|x| f(key, x))
        .collect()
}

pub fn int(v: impl Into<i64>) -> Value {
    Value::Integer(v.into())
}

pub fn uint(v: u64) -> Value {
    Value::Integer(v as i64)
}

pub fn string(v: impl ToString) -> Value {
    Value::String(v.to_string())
}

pub fn list<T: Copy>(v: &[T], f: impl Fn(T) -> Value) -> Value {
    Value::Array(v.iter().map(|&x| f(x)).collect())
}

/// Parses a command-line value as a TOML value, falling back to a bare string.
pub fn parse_cli_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_values() {
        assert_eq!(parse_cli_value("3"), Value::Integer(3));
        assert_eq!(parse_cli_value("0.5"), Value::Float(0.5));
        assert_eq!(
            parse_cli_value("adaptive"),
            Value::String("adaptive".into())
        );
        assert_eq!(
            parse_cli_value("[8, 16, 32]"),
            Value::Array(vec![int(8), int(16), int(32)])
        );
        assert_eq!(parse_cli_value("true"), Value::Boolean(true));
        assert_eq!(
            parse_cli_value("data/synth"),
            Value::String("data/synth".into())
        );
    }

    #[test]
    fn typed_errors_name_the_key() {
        let e = as_u64("train.iterations", &Value::Integer(-1)).unwrap_err();
        assert!(e.to_string().contains("train.iterations"));
        assert_eq!(as_f64("x", &Value::Integer(2)).unwrap(), 2.0);
    }
}
