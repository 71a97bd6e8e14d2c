//! Binary checkpoints: magic "CLPN", little-endian throughout, f64 payloads
//! so save -> load -> resume is bit-exact.
//!
//! Layout:
//!   magic "CLPN" | version u32 | dims 8 x u64 | share u8 | step u64
//!   | opt_t u64 | seed u64 | config text (u64 len + utf-8)
//!   | tensor count u64 | entries
//! and each entry is
//!   name (u64 len + utf-8) | rank u64 | dims rank x u64 | values numel x f64
//! Entries cover every online and target tensor plus the optimizer moments
//! (`opt.m.<name>` / `opt.v.<name>`), written in a fixed order so re-saving
//! a loaded checkpoint is byte-identical.

use super::adamw::AdamW;
use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{DimsConfig, ModelState};
use crate::numerics::{Rng, Tensor};
use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"CLPN";
pub const VERSION: u32 = 1;

// ---- writing ----

fn push_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    push_str(buf, name);
    buf.extend_from_slice(&(shape.len() as u64).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in values {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn dims_to_words(d: &DimsConfig) -> [u64; 8] {
    [
        d.image_side as u64,
        d.d_enc as u64,
        d.d_pre as u64,
        d.d_cl as u64,
        d.d_ncl as u64,
        d.predictor_bottleneck as u64,
        d.vocab_size as u64,
        d.max_text_len as u64,
    ]
}

pub fn save_checkpoint(
    path: &Path,
    model: &ModelState,
    opt: &AdamW,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for w in dims_to_words(&model.dims) {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    buf.push(model.share_pre_projectors as u8);
    buf.extend_from_slice(&model.step.to_le_bytes());
    buf.extend_from_slice(&opt.t().to_le_bytes());
    buf.extend_from_slice(&cfg.seed.to_le_bytes());
    push_str(&mut buf, &cfg.serialize());

    let online = model.named_online();
    let target = model.named_target();
    let moments: Vec<_> = opt.named_moments().collect();
    let count = online.len() + target.len() + 2 * moments.len();
    buf.extend_from_slice(&(count as u64).to_le_bytes());
    for (name, t) in online.iter().chain(target.iter()) {
        push_tensor(&mut buf, name, t.shape(), t.values());
    }
    for (name, m, v) in moments {
        push_tensor(&mut buf, &format!("opt.m.{name}"), &[m.len()], m);
        push_tensor(&mut buf, &format!("opt.v.{name}"), &[v.len()], v);
    }
    std::fs::write(path, buf)?;
    Ok(())
}

// ---- reading ----

pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Raw checkpoint contents; header and tensor table only, no model built.
pub struct CheckpointData {
    pub version: u32,
    pub dims: DimsConfig,
    pub share_pre_projectors: bool,
    pub step: u64,
    pub opt_t: u64,
    pub seed: u64,
    pub config_text: String,
    /// In file order.
    pub tensors: Vec<TensorEntry>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} overflows usize")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.usize()?;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 string field".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let buf = std::fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let w: Vec<u64> = (0..8).map(|_| r.u64()).collect::<Result<_>>()?;
    let dims = DimsConfig {
        image_side: w[0] as usize,
        d_enc: w[1] as usize,
        d_pre: w[2] as usize,
        d_cl: w[3] as usize,
        d_ncl: w[4] as usize,
        predictor_bottleneck: w[5] as usize,
        vocab_size: w[6] as usize,
        max_text_len: w[7] as usize,
    };
    let share_pre_projectors = r.u8()? != 0;
    let step = r.u64()?;
    let opt_t = r.u64()?;
    let seed = r.u64()?;
    let config_text = r.string()?;
    let count = r.usize()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.usize()?;
        let shape: Vec<usize> = (0..rank).map(|_| r.usize()).collect::<Result<_>>()?;
        let numel = shape.iter().product::<usize>().max(1);
        let values = r.f64s(numel)?;
        tensors.push(TensorEntry { name, shape, values });
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(CheckpointData {
        version,
        dims,
        share_pre_projectors,
        step,
        opt_t,
        seed,
        config_text,
        tensors,
    })
}

/// Rebuilds the full training state: model (online + target towers at the
/// checkpointed values), optimizer (moments and clock), and the echoed
/// config. Every model tensor must be present with a matching shape.
pub fn restore_training(data: &CheckpointData) -> Result<(ModelState, AdamW, TrainConfig)> {
    let cfg = TrainConfig::parse(&data.config_text)?;
    let by_name: BTreeMap<&str, &TensorEntry> =
        data.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut model = ModelState::init(
        data.dims,
        data.share_pre_projectors,
        &Rng::new(data.seed).stream("model"),
    )?;
    // online tensors stay trainable parameters; target tensors are plain
    fn install(
        by_name: &BTreeMap<&str, &TensorEntry>,
        trainable: bool,
        name: &str,
        slot: &mut Tensor,
    ) -> Result<()> {
        let entry = by_name
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
        if entry.shape != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}': shape {:?} in file, {:?} expected",
                entry.shape,
                slot.shape()
            )));
        }
        *slot = if trainable {
            Tensor::param(&entry.shape, entry.values.clone())?
        } else {
            Tensor::new(&entry.shape, entry.values.clone())?
        };
        Ok(())
    }
    let mut failure: Option<Error> = None;
    let mut seen = 0usize;
    model.update_online(&mut |name, slot| {
        if failure.is_none() {
            match install(&by_name, true, &name, slot) {
                Ok(()) => seen += 1,
                Err(e) => failure = Some(e),
            }
        }
    });
    model.update_target(&mut |name, slot| {
        if failure.is_none() {
            match install(&by_name, false, &name, slot) {
                Ok(()) => seen += 1,
                Err(e) => failure = Some(e),
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    // everything beyond the model tensors must be optimizer state
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    let mut extra = 0usize;
    for entry in &data.tensors {
        if let Some(rest) = entry.name.strip_prefix("opt.m.") {
            m.insert(rest.to_string(), entry.values.clone());
        } else if let Some(rest) = entry.name.strip_prefix("opt.v.") {
            v.insert(rest.to_string(), entry.values.clone());
        } else if entry.name.starts_with("online.") || entry.name.starts_with("target.") {
            // consumed (or rejected) by the install pass above
        } else {
            extra += 1;
        }
    }
    if extra > 0 || data.tensors.len() != seen + m.len() + v.len() {
        return Err(Error::Checkpoint(format!(
            "unexpected tensor table: {} entries, {} model slots, {} moment entries",
            data.tensors.len(),
            seen,
            m.len() + v.len()
        )));
    }
    if m.keys().ne(v.keys()) {
        return Err(Error::Checkpoint("optimizer m/v tables disagree".into()));
    }
    model.step = data.step;
    let mut opt = AdamW::from_config(&cfg);
    opt.restore(data.opt_t, m, v);
    Ok((model, opt, cfg))
}

/// Human-readable header + tensor table, built from the raw data alone.
pub fn summary(data: &CheckpointData) -> String {
    let mut out = String::new();
    let d = &data.dims;
    out.push_str(&format!("version\t{}\n", data.version));
    out.push_str(&format!(
        "dims\timage_side={} d_enc={} d_pre={} d_cl={} d_ncl={} predictor_bottleneck={} vocab_size={} max_text_len={}\n",
        d.image_side, d.d_enc, d.d_pre, d.d_cl, d.d_ncl, d.predictor_bottleneck, d.vocab_size,
        d.max_text_len
    ));
    out.push_str(&format!("share_pre_projectors\t{}\n", data.share_pre_projectors));
    out.push_str(&format!("step\t{}\n", data.step));
    out.push_str(&format!("opt_t\t{}\n", data.opt_t));
    out.push_str(&format!("seed\t{}\n", data.seed));
    let total: usize = data.tensors.iter().map(|e| e.values.len()).sum();
    out.push_str(&format!("tensors\t{}\ttotal_values\t{}\n", data.tensors.len(), total));
    for e in &data.tensors {
        let shape = e.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        let shape = if shape.is_empty() { "scalar".to_string() } else { shape };
        out.push_str(&format!("{}\t{}\t{}\n", e.name, shape, e.values.len()));
    }
    out.push_str("-- config --\n");
    out.push_str(&data.config_text);
    out
}
