//! θ on disk: a text manifest plus a flat little-endian blob.
//!
//! A checkpoint is a directory holding `manifest.txt` and `weights.bin`.
//! The manifest lists the model config, the float type, and one line per
//! parameter: `param <name> <dims comma-separated> <offset> <count>`, with
//! offsets and counts in elements.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{FfnKind, ModelConfig, ModelWeights};
use crate::tensor::{Float, Tensor, DTYPE};

pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "weights.bin";
const FORMAT: &str = "focusft-checkpoint 1";
const WIDTH: usize = std::mem::size_of::<Float>();

fn model_lines(c: &ModelConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model.n_layers {}", c.n_layers);
    let _ = writeln!(s, "model.n_heads {}", c.n_heads);
    let _ = writeln!(s, "model.d_model {}", c.d_model);
    let _ = writeln!(s, "model.d_ff {}", c.d_ff);
    let _ = writeln!(s, "model.vocab_size {}", c.vocab_size);
    let _ = writeln!(s, "model.max_seq_len {}", c.max_seq_len);
    let _ = writeln!(s, "model.rope {}", c.rope);
    let _ = writeln!(s, "model.rope_base {}", c.rope_base);
    let ffn = match c.ffn {
        FfnKind::Plain => "plain",
        FfnKind::Gated => "gated",
    };
    let _ = writeln!(s, "model.ffn {ffn}");
    let _ = writeln!(s, "model.norm_eps {}", c.norm_eps);
    let _ = writeln!(s, "model.seed {}", c.seed);
    s
}

pub fn save(weights: &ModelWeights, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = format!("format {FORMAT}\ndtype {DTYPE}\nendianness little\n");
    manifest.push_str(&model_lines(&weights.config));
    let mut blob = Vec::with_capacity(weights.param_count() * WIDTH);
    let mut offset = 0;
    for (name, t) in weights.named_params() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(manifest, "param {name} {} {offset} {}", dims.join(","), t.len());
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    }
    // Blob first: a manifest only exists next to a complete blob.
    std::fs::write(dir.join(BLOB), blob)?;
    std::fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    count: usize,
}

fn perr(msg: impl Into<String>) -> Error {
    Error::Parse(format!("checkpoint manifest: {}", msg.into()))
}

pub fn load(dir: &Path) -> Result<ModelWeights> {
    let text = std::fs::read_to_string(dir.join(MANIFEST))?;
    let blob = std::fs::read(dir.join(BLOB))?;
    let mut config = ModelConfig::default();
    let mut entries = Vec::new();
    let mut seen_format = false;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (key, rest) = line.split_once(' ').ok_or_else(|| perr(format!("bad line {line:?}")))?;
        let num = |v: &str| v.parse::<usize>().map_err(|e| perr(format!("{key}: {e}")));
        let float = |v: &str| v.parse::<Float>().map_err(|e| perr(format!("{key}: {e}")));
        match key {
            "format" => {
                if rest != FORMAT {
                    return Err(perr(format!("unsupported format {rest:?}")));
                }
                seen_format = true;
            }
            "dtype" => {
                if rest != DTYPE {
                    return Err(perr(format!("stored as {rest}, this build uses {DTYPE}")));
                }
            }
            "endianness" => {
                if rest != "little" {
                    return Err(perr(format!("unsupported endianness {rest}")));
                }
            }
            "model.n_layers" => config.n_layers = num(rest)?,
            "model.n_heads" => config.n_heads = num(rest)?,
            "model.d_model" => config.d_model = num(rest)?,
            "model.d_ff" => config.d_ff = num(rest)?,
            "model.vocab_size" => config.vocab_size = num(rest)?,
            "model.max_seq_len" => config.max_seq_len = num(rest)?,
            "model.rope" => config.rope = rest == "true",
            "model.rope_base" => config.rope_base = float(rest)?,
            "model.ffn" => {
                config.ffn = match rest {
                    "plain" => FfnKind::Plain,
                    "gated" => FfnKind::Gated,
                    _ => return Err(perr(format!("unknown ffn {rest}"))),
                }
            }
            "model.norm_eps" => config.norm_eps = float(rest)?,
            "model.seed" => config.seed = rest.parse().map_err(|e| perr(format!("{key}: {e}")))?,
            "param" => {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 4 {
                    return Err(perr(format!("bad param line {line:?}")));
                }
                entries.push(Entry {
                    name: f[0].to_string(),
                    shape: f[1].split(',').map(num).collect::<Result<_>>()?,
                    offset: num(f[2])?,
                    count: num(f[3])?,
                });
            }
            _ => return Err(perr(format!("unknown key {key}"))),
        }
    }
    if !seen_format {
        return Err(perr("missing format line"));
    }
    let mut weights = crate::model::init_model(&config)?;
    let expected: Vec<(String, Vec<usize>)> = weights
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != entries.len() {
        return Err(perr(format!(
            "{} parameters listed, config implies {}",
            entries.len(),
            expected.len()
        )));
    }
    for ((slot, (name, shape)), e) in weights.params_mut().into_iter().zip(&expected).zip(&entries) {
        if &e.name != name || &e.shape != shape || e.count != shape.iter().product::<usize>() {
            return Err(perr(format!("parameter {} does not match {name} {shape:?}", e.name)));
        }
        let start = e.offset * WIDTH;
        let end = start + e.count * WIDTH;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| perr(format!("blob too short for {name}")))?;
        let data: Vec<Float> = bytes
            .chunks_exact(WIDTH)
            .map(|c| Float::from_le_bytes(c.try_into().expect("exact chunk")))
            .collect();
        *slot = Tensor::new(shape.clone(), data)?;
    }
    Ok(weights)
}
