//! Single-file `.gtsa` archive: a text manifest terminated by an `end` line,
//! followed by raw little-endian f32 array data.
//!
//! ```text
//! gtsa-checkpoint
//! version = 1
//! [config]
//! dim = 64
//! ...
//! [state]
//! step = 500
//! epoch = 32
//! momentum = 0.99999
//! [arrays]
//! student.encoder.patch_embed.w f32 192x64 0
//! ...
//! end
//! ```
//!
//! Array offsets are byte offsets into the data section.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::config::TrainConfig;
use super::step::TrainState;
use crate::error::{GtsaError, Result};
use crate::model::Array;

pub const MAGIC: &str = "gtsa-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
const END: &str = "end\n";

fn groups(state: &TrainState) -> [(&'static str, Vec<(String, &Array<f32>)>); 4] {
    [
        ("student", state.student.named_arrays()),
        ("teacher", state.teacher.named_arrays()),
        ("adam_m", state.optim.m.named_arrays()),
        ("adam_v", state.optim.v.named_arrays()),
    ]
}

fn groups_mut(state: &mut TrainState) -> BTreeMap<String, &mut Array<f32>> {
    let mut out = BTreeMap::new();
    for (prefix, arrays) in [
        ("student", state.student.named_arrays_mut()),
        ("teacher", state.teacher.named_arrays_mut()),
        ("adam_m", state.optim.m.named_arrays_mut()),
        ("adam_v", state.optim.v.named_arrays_mut()),
    ] {
        for (name, a) in arrays {
            out.insert(format!("{prefix}.{name}"), a);
        }
    }
    out
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn encode_checkpoint(state: &TrainState, cfg: &TrainConfig) -> Vec<u8> {
    let mut head = String::new();
    let _ = writeln!(head, "{MAGIC}");
    let _ = writeln!(head, "version = {FORMAT_VERSION}");
    head.push_str("[config]\n");
    head.push_str(&cfg.to_text());
    head.push_str("[state]\n");
    let _ = writeln!(head, "step = {}", state.step);
    let _ = writeln!(head, "epoch = {}", state.epoch);
    let _ = writeln!(head, "momentum = {}", state.momentum);
    head.push_str("[arrays]\n");
    let mut data = Vec::new();
    for (prefix, arrays) in groups(state) {
        for (name, a) in arrays {
            let _ = writeln!(head, "{prefix}.{name} f32 {} {}", shape_text(&a.shape), data.len());
            for v in &a.data {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    head.push_str(END);
    let mut out = head.into_bytes();
    out.extend_from_slice(&data);
    out
}

pub fn save_checkpoint(state: &TrainState, cfg: &TrainConfig, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(state, cfg)).map_err(|e| GtsaError::io(format!("writing {}", path.display()), e))
}

fn bad(msg: impl Into<String>) -> GtsaError {
    GtsaError::Checkpoint(msg.into())
}

fn parse_kv(line: &str) -> Result<(&str, &str)> {
    line.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| bad(format!("malformed line {line:?}")))
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(TrainState, TrainConfig)> {
    let end = bytes
        .windows(END.len() + 1)
        .position(|w| w == b"\nend\n")
        .ok_or_else(|| bad("manifest has no end line"))?;
    let head = std::str::from_utf8(&bytes[..end + 1]).map_err(|_| bad("manifest is not UTF-8"))?;
    let data = &bytes[end + 1 + END.len()..];

    let mut lines = head.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("not a gtsa checkpoint"));
    }
    let (k, v) = parse_kv(lines.next().unwrap_or(""))?;
    if k != "version" {
        return Err(bad("missing version line"));
    }
    let version: u32 = v.parse().map_err(|_| bad(format!("bad version {v:?}")))?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}, expected {FORMAT_VERSION}")));
    }

    let mut section = "";
    let mut cfg = TrainConfig::default();
    let (mut step, mut epoch, mut momentum) = (None, None, None);
    let mut entries = Vec::new();
    for line in lines {
        if line.starts_with('[') {
            section = line;
            continue;
        }
        match section {
            "[config]" => {
                let (k, v) = parse_kv(line)?;
                cfg.set(k, v)?;
            }
            "[state]" => {
                let (k, v) = parse_kv(line)?;
                let err = || bad(format!("bad state value {v:?} for {k}"));
                match k {
                    "step" => step = Some(v.parse::<u64>().map_err(|_| err())?),
                    "epoch" => epoch = Some(v.parse::<u64>().map_err(|_| err())?),
                    "momentum" => momentum = Some(v.parse::<f64>().map_err(|_| err())?),
                    _ => return Err(bad(format!("unknown state key {k:?}"))),
                }
            }
            "[arrays]" => {
                let parts: Vec<&str> = line.split_whitespace().collect();
                let [name, dtype, shape, offset] = parts[..] else {
                    return Err(bad(format!("malformed array line {line:?}")));
                };
                if dtype != "f32" {
                    return Err(bad(format!("unsupported dtype {dtype} for {name}")));
                }
                let shape = shape
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(format!("bad shape for {name}")))?;
                let offset = offset.parse().map_err(|_| bad(format!("bad offset for {name}")))?;
                entries.push(Entry {
                    name: name.to_string(),
                    shape,
                    offset,
                });
            }
            _ => return Err(bad(format!("line outside any section: {line:?}"))),
        }
    }
    cfg.validate()?;

    let mut state = TrainState::new(&cfg)?;
    state.step = step.ok_or_else(|| bad("missing step"))?;
    state.epoch = epoch.ok_or_else(|| bad("missing epoch"))?;
    state.momentum = momentum.ok_or_else(|| bad("missing momentum"))?;

    let expected = entries
        .iter()
        .map(|e| e.offset + 4 * e.shape.iter().product::<usize>())
        .max()
        .unwrap_or(0);
    if data.len() < expected {
        return Err(GtsaError::Truncated {
            expected,
            found: data.len(),
        });
    }
    if data.len() > expected {
        return Err(bad(format!("{} trailing bytes after array data", data.len() - expected)));
    }

    let mut targets = groups_mut(&mut state);
    let total = targets.len();
    let mut seen = 0;
    for e in &entries {
        let target = targets
            .get_mut(&e.name)
            .ok_or_else(|| bad(format!("unknown array name {:?}", e.name)))?;
        if target.shape != e.shape {
            return Err(bad(format!("array {} has shape {:?}, model expects {:?}", e.name, e.shape, target.shape)));
        }
        for (j, v) in target.data.iter_mut().enumerate() {
            let at = e.offset + 4 * j;
            *v = f32::from_le_bytes(data[at..at + 4].try_into().expect("4 bytes"));
        }
        seen += 1;
    }
    if seen != total || entries.len() != total {
        return Err(bad(format!("archive holds {} arrays, model has {total}", entries.len())));
    }
    drop(targets);
    Ok((state, cfg))
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let bytes = std::fs::read(path).map_err(|e| GtsaError::io(format!("reading {}", path.display()), e))?;
    decode_checkpoint(&bytes)
}
