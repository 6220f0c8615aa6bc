//! Checkpoint files `ckpt_{step}.scn`: a text manifest (step, model
//! configuration, name and shape of every tensor) followed by the tensors in
//! the snapshot format, in manifest order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use toml::{Table, Value};

use super::adam::Adam;
use crate::config_value::{as_list, as_str, as_u64, as_usize};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ScnParams};
use crate::tensor::{read_snapshot_from, write_snapshot_to, Tensor};

const MAGIC: &str = "scn-checkpoint 1";
const END: &str = "end-manifest";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub params: ScnParams,
    pub adam: Option<Adam>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step}.scn"))
}

fn tensor_entry(role: &str, name: &str, t: &Tensor) -> Value {
    let mut e = Table::new();
    e.insert("role".into(), Value::String(role.into()));
    e.insert("name".into(), Value::String(name.into()));
    e.insert(
        "shape".into(),
        Value::Array(
            t.shape()
                .iter()
                .map(|&d| Value::Integer(d as i64))
                .collect(),
        ),
    );
    Value::Table(e)
}

pub fn save_checkpoint(
    path: &Path,
    step: u64,
    params: &ScnParams,
    adam: Option<&Adam>,
) -> Result<()> {
    let mut manifest = Table::new();
    manifest.insert("step".into(), Value::Integer(step as i64));
    if let Some(a) = adam {
        manifest.insert("adam_steps".into(), Value::Integer(a.t as i64));
    }
    let config: Table = params
        .config
        .entries()
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    manifest.insert("config".into(), Value::Table(config));

    let mut tensors: Vec<(&str, &str, &Tensor)> =
        params.iter().map(|(n, t)| ("param", n, t)).collect();
    if let Some(a) = adam {
        let names = params.names();
        tensors.extend(
            names
                .iter()
                .zip(&a.m)
                .map(|(n, t)| ("adam_m", n.as_str(), t)),
        );
        tensors.extend(
            names
                .iter()
                .zip(&a.v)
                .map(|(n, t)| ("adam_v", n.as_str(), t)),
        );
    }
    manifest.insert(
        "tensor".into(),
        Value::Array(
            tensors
                .iter()
                .map(|(r, n, t)| tensor_entry(r, n, t))
                .collect(),
        ),
    );
    let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let ctx = || format!("writing {}", path.display());
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(w, "{MAGIC}")?;
        w.write_all(text.as_bytes())?;
        writeln!(w, "{END}")?;
        for (_, _, t) in &tensors {
            write_snapshot_to(w, t)?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(ctx(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path)
        .map_err(|e| Error::io(format!("opening checkpoint {}", path.display()), e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    let read_line = |r: &mut BufReader<File>, line: &mut String| -> Result<()> {
        line.clear();
        let n = r
            .read_line(line)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if n == 0 {
            return Err(Error::Checkpoint(format!(
                "{}: manifest is truncated",
                path.display()
            )));
        }
        Ok(())
    };
    read_line(&mut r, &mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let mut text = String::new();
    loop {
        read_line(&mut r, &mut line)?;
        if line.trim_end() == END {
            break;
        }
        text.push_str(&line);
    }
    let manifest: Table = text
        .parse()
        .map_err(|e| Error::Checkpoint(format!("{}: bad manifest: {e}", path.display())))?;
    let get = |k: &str| {
        manifest
            .get(k)
            .ok_or_else(|| Error::Checkpoint(format!("{}: manifest lacks `{k}`", path.display())))
    };
    let step = as_u64("step", get("step")?)?;

    let mut config = ModelConfig::default();
    let table = get("config")?
        .as_table()
        .ok_or_else(|| Error::Checkpoint("manifest `config` is not a table".into()))?;
    for (k, v) in table {
        if !config.set(k, v)? {
            return Err(Error::Checkpoint(format!(
                "unknown configuration key `{k}` in manifest"
            )));
        }
    }
    let mut params = ScnParams::init(&config, 0)?;

    let entries = get("tensor")?
        .as_array()
        .ok_or_else(|| Error::Checkpoint("manifest `tensor` is not a list".into()))?;
    let mut by_role: [Vec<(String, Tensor)>; 3] = Default::default();
    for e in entries {
        let role = as_str(
            "tensor.role",
            e.get("role").unwrap_or(&Value::Boolean(false)),
        )?;
        let name = as_str(
            "tensor.name",
            e.get("name").unwrap_or(&Value::Boolean(false)),
        )?;
        let shape = as_list(
            "tensor.shape",
            e.get("shape").unwrap_or(&Value::Boolean(false)),
            as_usize,
        )?;
        let t = read_snapshot_from(&mut r)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` is listed as {shape:?} but stored as {:?}",
                t.shape()
            )));
        }
        let slot = match role {
            "param" => 0,
            "adam_m" => 1,
            "adam_v" => 2,
            other => return Err(Error::Checkpoint(format!("unknown tensor role `{other}`"))),
        };
        by_role[slot].push((name.to_string(), t));
    }
    let [p, m, v] = by_role;
    params.load_tensors(p)?;
    let adam = match manifest.get("adam_steps") {
        Some(t) => {
            let mut a = Adam::new(params.tensors());
            let mut scratch = params.clone();
            scratch.load_tensors(m)?;
            a.m = scratch.tensors().to_vec();
            scratch.load_tensors(v)?;
            a.v = scratch.tensors().to_vec();
            a.t = as_u64("adam_steps", t)?;
            Some(a)
        }
        None => None,
    };
    Ok(Checkpoint { step, params, adam })
}
