//! Checkpoints: concatenated GATN tensors with a TSV index.
//!
//! A checkpoint at `run/model.gatn` consists of
//!
//! * `run/model.gatn`: parameters and batch-norm statistics,
//! * `run/model.tsv`: `name  shape  offset` for every tensor in it,
//! * `run/model.opt.gatn` and `run/model.opt.tsv`: optimizer moments,
//! * `run/model.cfg`: the run configuration.

use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::GeomAttnModel;
use crate::params::Adam;
use crate::tensor::Tensor;

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn index_path(container: &Path) -> PathBuf {
    sidecar(container, ".tsv")
}

/// Writes tensors back to back and an index of their byte offsets.
pub fn write_container(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut bytes = Vec::new();
    let mut index = String::from("name\tshape\toffset\n");
    for (name, t) in entries {
        if name.contains(['\t', '\n']) {
            return Err(Error::invalid("write_container", format!("tensor name {name:?} contains a tab or newline")));
        }
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        index.push_str(&format!("{name}\t{}\t{}\n", shape.join(","), bytes.len()));
        t.write_gatn(&mut bytes)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    std::fs::write(index_path(path), index)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path)?;
    let index = std::fs::read_to_string(index_path(path))?;
    let mut lines = index.lines();
    if lines.next() != Some("name\tshape\toffset") {
        return Err(Error::format("checkpoint index", "missing header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = |d: &str| Error::format("checkpoint index", format!("{line:?}: {d}"));
            if f.len() != 3 {
                return Err(bad("expected three fields"));
            }
            let offset: usize = f[2].parse().map_err(|_| bad("bad offset"))?;
            if offset > bytes.len() {
                return Err(bad("offset past end of container"));
            }
            let t = Tensor::read_gatn(&mut Cursor::new(&bytes[offset..]))?;
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            if shape.join(",") != f[1] {
                return Err(bad(&format!("index shape {} but stored {:?}", f[1], t.shape())));
            }
            Ok((f[0].to_string(), t))
        })
        .collect()
}

pub fn save_checkpoint(path: &Path, model: &GeomAttnModel, optimizer: &Adam, cfg: &RunConfig) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    write_container(path, &model.store.state())?;
    write_container(&sidecar(path, ".opt.gatn"), &optimizer.state(&model.store))?;
    std::fs::write(sidecar(path, ".cfg"), cfg.to_text())?;
    Ok(())
}

pub struct Checkpoint {
    pub config: RunConfig,
    pub model: GeomAttnModel,
    pub optimizer: Adam,
}

/// Rebuilds the model described by the config sidecar and loads its state.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let config = RunConfig::load(sidecar(path, ".cfg"))?;
    let state = read_container(path)?;
    let n_ids = state
        .iter()
        .find(|(n, _)| n == "gb.id_head")
        .map(|(_, t)| t.shape()[0])
        .ok_or_else(|| Error::format("checkpoint", "missing tensor gb.id_head"))?;
    let mut model = GeomAttnModel::new(config.model_config(n_ids))?;
    model.store.load_state(&state)?;
    let mut optimizer = Adam::new(config.adam(), &model.store);
    let opt_path = sidecar(path, ".opt.gatn");
    if opt_path.exists() {
        optimizer.load_state(&model.store, &read_container(&opt_path)?)?;
    }
    Ok(Checkpoint {
        config,
        model,
        optimizer,
    })
}
