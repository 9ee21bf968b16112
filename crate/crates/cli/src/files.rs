//! Scene files, checkpoints and CSV output.

use std::fs;
use std::path::{Path, PathBuf};

use flowmamba_core::nn::ParamStore;
use flowmamba_core::pipeline::SyntheticScene;
use flowmamba_core::Tensor;

use crate::error::{CliError, Result};

/// A scene as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFile {
    /// File stem, used as the scene id.
    pub id: String,
    pub seed: u64,
    pub source: Tensor,
    pub target: Tensor,
    pub flow: Tensor,
}

/// Source points with their flow, one `x y z fx fy fz` line each. A
/// `# target` section follows when the second frame is not simply the moved
/// source (noise or occlusion).
pub fn render_scene(scene: &SyntheticScene) -> String {
    let mut out = format!("# seed {}\n", scene.seed);
    for i in 0..scene.len() {
        let (p, f) = (scene.source.row(i), scene.flow.row(i));
        out.push_str(&format!("{} {} {} {} {} {}\n", p[0], p[1], p[2], f[0], f[1], f[2]));
    }
    let moved_matches = scene.target.rows() == scene.len()
        && (0..scene.len()).all(|i| {
            let (p, f, q) = (scene.source.row(i), scene.flow.row(i), scene.target.row(i));
            (0..3).all(|j| p[j] + f[j] == q[j])
        });
    if !moved_matches {
        out.push_str("# target\n");
        for i in 0..scene.target.rows() {
            let q = scene.target.row(i);
            out.push_str(&format!("{} {} {}\n", q[0], q[1], q[2]));
        }
    }
    out
}

pub fn parse_scene(path: &Path, text: &str) -> Result<SceneFile> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (mut seed, mut in_target) = (0, false);
    let (mut src, mut flow, mut tgt) = (Vec::new(), Vec::new(), Vec::new());
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if let Some(comment) = line.strip_prefix('#') {
            let comment = comment.trim();
            if comment == "target" {
                in_target = true;
            } else if let Some(s) = comment.strip_prefix("seed") {
                seed = s
                    .trim()
                    .parse()
                    .map_err(|_| CliError::format(path, format!("line {}: bad seed", n + 1)))?;
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| CliError::format(path, format!("line {}: expected decimal numbers", n + 1)))?;
        match (in_target, values.len()) {
            (false, 6) => {
                src.extend_from_slice(&values[..3]);
                flow.extend_from_slice(&values[3..]);
            }
            (true, 3) => tgt.extend_from_slice(&values),
            (_, got) => {
                let want = if in_target { 3 } else { 6 };
                return Err(CliError::format(
                    path,
                    format!("line {}: expected {want} values, got {got}", n + 1),
                ));
            }
        }
    }
    if src.is_empty() {
        return Err(CliError::format(path, "scene has no points"));
    }
    let n = src.len() / 3;
    let source = Tensor::new(&[n, 3], src)?;
    let flow = Tensor::new(&[n, 3], flow)?;
    let target = if in_target {
        if tgt.is_empty() {
            return Err(CliError::format(path, "empty target section"));
        }
        Tensor::new(&[tgt.len() / 3, 3], tgt)?
    } else {
        Tensor::from_fn(&[n, 3], |i| source.data()[i] + flow.data()[i])
    };
    Ok(SceneFile {
        id,
        seed,
        source,
        target,
        flow,
    })
}

pub fn read_scene(path: &Path) -> Result<SceneFile> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_scene(path, &text)
}

/// Every `*.txt` scene in `dir`, sorted by file name.
pub fn read_scene_dir(dir: &Path) -> Result<Vec<SceneFile>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "txt") {
            paths.push(path);
        }
    }
    if paths.is_empty() {
        return Err(CliError::format(dir, "no scene files (*.txt)"));
    }
    paths.sort();
    paths.iter().map(|p| read_scene(p)).collect()
}

/// Header of `name=d1,d2` lines, a blank line, then every tensor as
/// little-endian `f64` in header order.
pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, t) in store.iter() {
        let dims: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
        out.extend_from_slice(format!("{name}={}\n", dims.join(",")).as_bytes());
    }
    out.push(b'\n');
    for (_, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a checkpoint into named tensors.
pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let bad = |m: &str| CliError::format(path, m.to_string());
    let end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| bad("missing header terminator"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8"))?;
    let mut payload = &bytes[end + 2..];
    let mut out = Vec::new();
    for line in header.lines() {
        let (name, shape) = line.split_once('=').ok_or_else(|| bad("header line without `=`"))?;
        let dims: Vec<usize> = if shape.is_empty() {
            Vec::new()
        } else {
            shape
                .split(',')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("malformed shape"))?
        };
        let count: usize = dims.iter().product();
        if payload.len() < 8 * count {
            return Err(bad("truncated payload"));
        }
        let (chunk, rest) = payload.split_at(8 * count);
        payload = rest;
        let data = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name.to_string(), Tensor::new(&dims, data)?));
    }
    if !payload.is_empty() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    write_bytes(path, &encode_checkpoint(store))
}

/// Loads a checkpoint into `store`, naming the first parameter that differs.
pub fn load_checkpoint(path: &Path, store: &mut ParamStore) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let entries = decode_checkpoint(path, &bytes)?;
    for (i, (name, t)) in store.iter().enumerate() {
        let Some((got_name, got)) = entries.get(i) else {
            return Err(CliError::CheckpointMismatch {
                name: name.to_string(),
                detail: "missing from checkpoint".into(),
            });
        };
        if got_name != name {
            return Err(CliError::CheckpointMismatch {
                name: name.to_string(),
                detail: format!("checkpoint has `{got_name}` in its place"),
            });
        }
        if got.shape() != t.shape() {
            return Err(CliError::CheckpointMismatch {
                name: name.to_string(),
                detail: format!("shape {:?} in checkpoint, {:?} expected", got.shape(), t.shape()),
            });
        }
    }
    if let Some((name, _)) = entries.get(store.len()) {
        return Err(CliError::CheckpointMismatch {
            name: name.clone(),
            detail: "not part of the configured network".into(),
        });
    }
    store.load(&entries)?;
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Writes a CSV file with a header row.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::format(path, e.to_string());
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.write_record(row).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::format(path, e.to_string()))?;
    write_bytes(path, &bytes)
}
