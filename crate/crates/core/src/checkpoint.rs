//! Model checkpoints.
//!
//! Layout, little-endian: magic `SSCK`, u32 version, u32 length of a UTF-8
//! `key=value` block holding the model configuration, u32 array count, then
//! per array a u32 name length, the name, u32 rows, u32 cols and row-major
//! f32 values. The semantic teacher, when present, is stored as two extra
//! arrays named `teacher.palette` and `teacher.table`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{parse_key_values, ByteReader, ByteWriter};
use crate::model::{Model, ModelConfig};
use crate::nn::{Mat, ParamStore};
use crate::synth::SemanticTeacher;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn config_text(c: &ModelConfig) -> String {
    let lines = [
        format!("width={}", c.width),
        format!("height={}", c.height),
        format!("patch={}", c.patch),
        format!("dim={}", c.dim),
        format!("blocks={}", c.blocks),
        format!("decoder_dim={}", c.decoder_dim),
        format!("head_hidden={}", c.head_hidden),
        format!("feature_dim={}", c.feature_dim),
        format!("init_depth={:?}", c.init_depth),
        format!("nominal_fov_deg={:?}", c.nominal_fov_deg),
        format!("scale_min={:?}", c.scale_min),
        format!("scale_max={:?}", c.scale_max),
        format!("semantic_head={}", c.semantic_head),
        format!("image_shortcut={}", c.image_shortcut),
        format!("semantic_shortcut={}", c.semantic_shortcut),
    ];
    let mut s = lines.join("\n");
    s.push('\n');
    s
}

fn parse_config_text(text: &str, at: u64) -> Result<ModelConfig> {
    let kv = parse_key_values(text).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset: at + offset,
            message,
        },
        other => other,
    })?;
    let get = |key: &str| -> Result<&str> {
        kv.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::format(at, format!("checkpoint config is missing `{key}`")))
    };
    fn num<T: std::str::FromStr>(key: &str, v: &str, at: u64) -> Result<T> {
        v.parse()
            .map_err(|_| Error::format(at, format!("checkpoint config value {key}={v} is invalid")))
    }
    let u = |k: &str| -> Result<usize> { num(k, get(k)?, at) };
    let f = |k: &str| -> Result<f64> { num(k, get(k)?, at) };
    let b = |k: &str| -> Result<bool> { num(k, get(k)?, at) };
    if kv.len() != 15 {
        return Err(Error::format(
            at,
            format!("checkpoint config has {} keys, expected 15", kv.len()),
        ));
    }
    let c = ModelConfig {
        width: u("width")?,
        height: u("height")?,
        patch: u("patch")?,
        dim: u("dim")?,
        blocks: u("blocks")?,
        decoder_dim: u("decoder_dim")?,
        head_hidden: u("head_hidden")?,
        feature_dim: u("feature_dim")?,
        init_depth: f("init_depth")?,
        nominal_fov_deg: f("nominal_fov_deg")?,
        scale_min: f("scale_min")?,
        scale_max: f("scale_max")?,
        semantic_head: b("semantic_head")?,
        image_shortcut: b("image_shortcut")?,
        semantic_shortcut: b("semantic_shortcut")?,
    };
    c.validate()
        .map_err(|e| Error::format(at, format!("checkpoint config is invalid: {e}")))?;
    Ok(c)
}

fn write_array(w: &mut ByteWriter, name: &str, m: &Mat) -> Result<()> {
    if !m
        .iter()
        .all(|v| v.is_finite() && v.abs() <= f32::MAX as f64)
    {
        return Err(Error::Numeric(format!(
            "parameter {name} is not representable as finite f32"
        )));
    }
    w.u32(name.len() as u32);
    w.bytes(name.as_bytes());
    w.u32(m.nrows() as u32);
    w.u32(m.ncols() as u32);
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            w.f32(m[(r, c)] as f32);
        }
    }
    Ok(())
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    w.bytes(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let text = config_text(&model.config);
    w.u32(text.len() as u32);
    w.bytes(text.as_bytes());
    let extra = if model.teacher.is_some() { 2 } else { 0 };
    w.u32((model.params.len() + extra) as u32);
    for (name, t) in model.params.names.iter().zip(&model.params.tensors) {
        write_array(&mut w, name, t)?;
    }
    if let Some(teacher) = &model.teacher {
        let palette = Mat::from_fn(teacher.palette.len(), 3, |r, c| teacher.palette[r][c]);
        let n = teacher.feature_dim();
        let table = Mat::from_fn(teacher.table.len(), n, |r, c| teacher.table[r][c]);
        write_array(&mut w, "teacher.palette", &palette)?;
        write_array(&mut w, "teacher.table", &table)?;
    }
    Ok(w.buf)
}

pub fn decode_checkpoint(data: &[u8]) -> Result<Model> {
    let mut r = ByteReader::new(data);
    r.expect_magic(&CHECKPOINT_MAGIC, "checkpoint")?;
    let at = r.offset();
    let version = r.u32("checkpoint version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            at,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let len = r.u32("config length")? as usize;
    let at = r.offset();
    let text = std::str::from_utf8(r.bytes(len, "config block")?)
        .map_err(|_| Error::format(at, "config block is not UTF-8"))?;
    let config = parse_config_text(text, at)?;
    let mut model = Model::new(config, 0).map_err(|e| Error::format(at, e.to_string()))?;

    let count_at = r.offset();
    let count = r.u32("array count")? as usize;
    let expected = model.params.len();
    if count != expected && count != expected + 2 {
        return Err(Error::format(
            count_at,
            format!("checkpoint has {count} arrays, this configuration needs {expected}"),
        ));
    }
    let mut params = ParamStore::new();
    let mut extra = Vec::new();
    for i in 0..count {
        let at = r.offset();
        let name_len = r.u32("array name length")? as usize;
        let name = std::str::from_utf8(r.bytes(name_len, "array name")?)
            .map_err(|_| Error::format(at, "array name is not UTF-8"))?
            .to_string();
        let rows = r.u32("array rows")? as usize;
        let cols = r.u32("array cols")? as usize;
        let want = if i < expected {
            let t = &model.params.tensors[i];
            if name != model.params.names[i] {
                return Err(Error::format(
                    at,
                    format!(
                        "array {i} is `{name}`, expected `{}`",
                        model.params.names[i]
                    ),
                ));
            }
            Some((t.nrows(), t.ncols()))
        } else {
            let ok = (i == expected && name == "teacher.palette")
                || (i == expected + 1 && name == "teacher.table");
            if !ok {
                return Err(Error::format(at, format!("unexpected array `{name}`")));
            }
            None
        };
        if want.is_some_and(|w| w != (rows, cols)) {
            return Err(Error::format(
                at,
                format!("array `{name}` has shape {rows}x{cols}, expected {want:?}"),
            ));
        }
        let size = rows
            .checked_mul(cols)
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| Error::format(at, format!("array `{name}` is larger than the file")))?;
        let mut m = Mat::zeros(rows, cols);
        for k in 0..size {
            let v_at = r.offset();
            let v = r.f32("array value")?;
            if !v.is_finite() {
                return Err(Error::format(v_at, format!("non-finite value in `{name}`")));
            }
            m[(k / cols, k % cols)] = v as f64;
        }
        if i < expected {
            params.add(name, m);
        } else {
            extra.push((at, m));
        }
    }
    r.finish("checkpoint")?;
    model
        .params
        .assign(&params)
        .map_err(|e| Error::format(count_at, e.to_string()))?;
    if let [(p_at, palette), (t_at, table)] = extra.as_slice() {
        if palette.ncols() != 3 {
            return Err(Error::format(*p_at, "teacher palette must have 3 columns"));
        }
        if table.nrows() != palette.nrows() || table.ncols() != config.feature_dim {
            return Err(Error::format(
                *t_at,
                "teacher table does not match the palette or feature dimension",
            ));
        }
        model.teacher = Some(SemanticTeacher {
            palette: (0..palette.nrows())
                .map(|r| [palette[(r, 0)], palette[(r, 1)], palette[(r, 2)]])
                .collect(),
            table: (0..table.nrows())
                .map(|r| table.row(r).iter().copied().collect())
                .collect(),
        });
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    decode_checkpoint(&fs::read(path)?).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}
