//! Checkpoint directories: `manifest.json` plus one raw little-endian f64
//! file per tensor, base and adapters in separate subdirectories.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{AdapterStack, BaseWeights, LoraAdapter, LoraConfig, LoraModule, Projection, Slot, TinyLmConfig};
use crate::error::{Error, Result};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModuleEntry {
    layer: usize,
    projection: Projection,
    a: TensorEntry,
    b: TensorEntry,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdapterEntry {
    config: LoraConfig,
    active: bool,
    modules: Vec<ModuleEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model: TinyLmConfig,
    base: Vec<TensorEntry>,
    stage1: Option<AdapterEntry>,
    stage2: Option<AdapterEntry>,
}

fn write_tensor(dir: &Path, sub: &str, name: &str, shape: &[usize], data: &[f64]) -> Result<TensorEntry> {
    let file = format!("{sub}/{name}.bin");
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(dir.join(&file), bytes)?;
    Ok(TensorEntry {
        name: name.to_string(),
        shape: shape.to_vec(),
        file,
    })
}

fn read_tensor(dir: &Path, entry: &TensorEntry, expected: &[usize]) -> Result<Vec<f64>> {
    if entry.shape != expected {
        return Err(Error::Shape {
            name: entry.name.clone(),
            expected: expected.to_vec(),
            found: entry.shape.clone(),
        });
    }
    let bytes = fs::read(dir.join(&entry.file))?;
    let n: usize = expected.iter().product();
    if bytes.len() != n * 8 {
        return Err(Error::Checkpoint(format!(
            "{}: expected {} bytes, found {}",
            entry.file,
            n * 8,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn adapter_entry(dir: &Path, slot: Slot, adapter: &LoraAdapter, active: bool) -> Result<AdapterEntry> {
    let sub = slot.to_string();
    fs::create_dir_all(dir.join(&sub))?;
    let mut modules = Vec::new();
    for m in &adapter.modules {
        let stem = format!("layers.{}.{}", m.layer, m.projection);
        modules.push(ModuleEntry {
            layer: m.layer,
            projection: m.projection,
            a: write_tensor(dir, &sub, &format!("{stem}.lora_a"), m.a.shape(), m.a.as_slice().expect("standard layout"))?,
            b: write_tensor(dir, &sub, &format!("{stem}.lora_b"), m.b.shape(), m.b.as_slice().expect("standard layout"))?,
        });
    }
    Ok(AdapterEntry {
        config: adapter.config.clone(),
        active,
        modules,
    })
}

/// Writes the stack to `path`, replacing any previous checkpoint there.
/// The directory is assembled next to `path` and renamed into place.
pub fn save_checkpoint(stack: &AdapterStack, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = sibling(path, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(tmp.join("base"))?;
    let base = stack
        .base
        .named_tensors()
        .into_iter()
        .map(|(name, shape, data)| write_tensor(&tmp, "base", &name, &shape, data))
        .collect::<Result<Vec<_>>>()?;
    let stage1 = stack
        .stage1
        .as_ref()
        .map(|a| adapter_entry(&tmp, Slot::Stage1, a, stack.stage1_active))
        .transpose()?;
    let stage2 = stack
        .stage2
        .as_ref()
        .map(|a| adapter_entry(&tmp, Slot::Stage2, a, stack.stage2_active))
        .transpose()?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: stack.config.clone(),
        base,
        stage1,
        stage2,
    };
    fs::write(tmp.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;

    let old = sibling(path, "old");
    if path.exists() {
        if old.exists() {
            fs::remove_dir_all(&old)?;
        }
        fs::rename(path, &old)?;
    }
    fs::rename(&tmp, path)?;
    if old.exists() {
        fs::remove_dir_all(&old)?;
    }
    Ok(())
}

fn sibling(path: &Path, tag: &str) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    path.with_file_name(format!(".{name}.{tag}"))
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    Ok(m)
}

fn read_base(dir: &Path, m: &Manifest) -> Result<BaseWeights> {
    // Shapes come from a freshly built skeleton so a mismatched manifest is
    // caught tensor by tensor.
    let mut base = BaseWeights::init(&m.model)?;
    let expected: Vec<(String, Vec<usize>)> = base
        .named_tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    if expected.len() != m.base.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} base tensors, manifest lists {}",
            expected.len(),
            m.base.len()
        )));
    }
    for ((slot, (name, shape)), entry) in base.tensors_mut().into_iter().zip(&expected).zip(&m.base) {
        if entry.name != *name {
            return Err(Error::Checkpoint(format!(
                "expected tensor `{name}`, found `{}`",
                entry.name
            )));
        }
        slot.copy_from_slice(&read_tensor(dir, entry, shape)?);
    }
    Ok(base)
}

fn read_adapter(dir: &Path, model: &TinyLmConfig, entry: &AdapterEntry) -> Result<LoraAdapter> {
    let r = entry.config.rank;
    let mut modules = Vec::new();
    for me in &entry.modules {
        let (out, inp) = me.projection.shape(model);
        let a = read_tensor(dir, &me.a, &[r, inp])?;
        let b = read_tensor(dir, &me.b, &[out, r])?;
        modules.push(LoraModule {
            layer: me.layer,
            projection: me.projection,
            a: Array2::from_shape_vec((r, inp), a).map_err(|e| Error::Checkpoint(e.to_string()))?,
            b: Array2::from_shape_vec((out, r), b).map_err(|e| Error::Checkpoint(e.to_string()))?,
        });
    }
    Ok(LoraAdapter {
        config: entry.config.clone(),
        modules,
    })
}

/// Loads base weights and every stored adapter with their active flags.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<AdapterStack> {
    let dir = path.as_ref();
    let m = read_manifest(dir)?;
    let mut stack = AdapterStack {
        config: m.model.clone(),
        base: read_base(dir, &m)?,
        stage1: None,
        stage2: None,
        stage1_active: false,
        stage2_active: false,
    };
    for (slot, entry) in [(Slot::Stage1, &m.stage1), (Slot::Stage2, &m.stage2)] {
        if let Some(e) = entry {
            stack.attach(slot, read_adapter(dir, &m.model, e)?)?;
            stack.set_active(slot, e.active);
        }
    }
    Ok(stack)
}

/// Plugs the adapter stored under `slot` in checkpoint `path` into
/// `stack`, activating it. Shapes must match the stack's model.
pub fn load_adapter(path: impl AsRef<Path>, slot: Slot, stack: &mut AdapterStack) -> Result<()> {
    let dir = path.as_ref();
    let m = read_manifest(dir)?;
    let entry = match slot {
        Slot::Stage1 => m.stage1.as_ref(),
        Slot::Stage2 => m.stage2.as_ref(),
    }
    .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no {slot} adapter")))?;
    let adapter = read_adapter(dir, &stack.config, entry)?;
    stack.attach(slot, adapter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward;

    fn cfg(d: usize) -> TinyLmConfig {
        TinyLmConfig {
            text_vocab_size: 16,
            visual_vocab_size: 4,
            d_model: d,
            n_layers: 1,
            n_heads: 2,
            d_ff: 2 * d,
            max_context: 16,
            seed: 3,
            recency_bias: true,
        }
    }

    fn trained(d: usize) -> AdapterStack {
        let mut s = AdapterStack::new(cfg(d)).unwrap();
        let lc = LoraConfig { rank: 2, alpha: 4.0, ..Default::default() };
        s.attach_fresh(Slot::Stage1, &lc, 1).unwrap();
        s.attach_fresh(Slot::Stage2, &lc, 2).unwrap();
        for slot in [Slot::Stage1, Slot::Stage2] {
            let a = s.adapter_mut(slot).unwrap();
            let v: Vec<f64> = (0..a.n_params()).map(|i| (i as f64 * 0.731).sin() * 0.1).collect();
            a.assign(&v);
        }
        s.stage2_active = false;
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt");
        let s = trained(8);
        save_checkpoint(&s, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, s);
        // Overwrite in place.
        save_checkpoint(&back, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), s);
    }

    #[test]
    fn adapter_on_wrong_base_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt");
        save_checkpoint(&trained(8), &p).unwrap();
        let mut other = AdapterStack::new(cfg(4)).unwrap();
        assert!(matches!(
            load_adapter(&p, Slot::Stage2, &mut other),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn base_plus_stage1_reconstructs_reference() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt");
        let mut full = trained(8);
        full.stage2_active = true;
        save_checkpoint(&full, &p).unwrap();

        let mut reference = AdapterStack::new(cfg(8)).unwrap();
        load_adapter(&p, Slot::Stage1, &mut reference).unwrap();
        let x = forward(&reference, &[1], &[2, 3, 4]).unwrap();
        let y = forward(&full.reference(), &[1], &[2, 3, 4]).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt");
        save_checkpoint(&trained(8), &p).unwrap();
        let mp = p.join("manifest.json");
        let text = fs::read_to_string(&mp).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&mp, text).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
    }
}
