//! Encoder checkpoints: the named-array container with the configuration
//! embedded in its header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{read_named_arrays, write_named_arrays};
use crate::error::{Error, Result};

use super::config::EncoderConfig;
use super::model::Encoder;

const HEADER_TAG: &str = "poslab checkpoint v1";

pub fn write_checkpoint<W: Write>(model: &Encoder, w: W) -> Result<()> {
    let header = format!("{HEADER_TAG}\n{}", model.config());
    let arrays: Vec<(&str, &_)> = model.params().iter().map(|(_, name, t)| (name, t)).collect();
    write_named_arrays(w, &header, &arrays)
}

fn parse_header(header: &str) -> Result<EncoderConfig> {
    let mut lines = header.lines();
    if lines.next() != Some(HEADER_TAG) {
        return Err(Error::Format("not an encoder checkpoint".into()));
    }
    let pairs: Vec<(&str, &str)> = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Format(format!("bad checkpoint header line {l:?}")))
        })
        .collect::<Result<_>>()?;
    EncoderConfig::from_pairs(pairs)
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Encoder> {
    let (header, arrays) = read_named_arrays(r)?;
    let config = parse_header(&header)?;
    Encoder::from_parts(config, arrays)
}

/// Like [`read_checkpoint`], but first requires the stored configuration
/// to equal `expected`, naming every differing key otherwise.
pub fn read_checkpoint_expecting<R: Read>(r: R, expected: &EncoderConfig) -> Result<Encoder> {
    let (header, arrays) = read_named_arrays(r)?;
    let config = parse_header(&header)?;
    let diff = config.diff(expected);
    if !diff.is_empty() {
        let lines: Vec<String> = diff.iter().map(|d| format!("config {d} (stored != expected)")).collect();
        return Err(Error::Checkpoint(lines.join("\n")));
    }
    Encoder::from_parts(config, arrays)
}

pub fn save_checkpoint(model: &Encoder, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Encoder> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
