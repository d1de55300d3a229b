use std::io::{Read, Write};

use lore_tensor::{read_blob, write_blob, Rng, Tensor};

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LORE";
pub const CHECKPOINT_VERSION: u32 = 1;
const INIT_STD: f64 = 0.02;
const MAX_NAME_LEN: u32 = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Name, shape and initialiser of every parameter, in checkpoint order.
pub fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    use Init::*;
    let d = cfg.d_model;
    let h = cfg.mlp_hidden();
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    push("tok_emb".into(), vec![cfg.vocab_size, d], Normal);
    push("txt_pos".into(), vec![cfg.max_text_tokens, d], Normal);
    push("patch_in.w".into(), vec![cfg.token_dim(), d], Normal);
    push("patch_in.b".into(), vec![d], Zeros);
    push("img_pos".into(), vec![cfg.image_tokens(), d], Normal);
    push("time.w1".into(), vec![cfg.time_embed_dim, d], Normal);
    push("time.b1".into(), vec![d], Zeros);
    push("time.w2".into(), vec![d, d], Normal);
    push("time.b2".into(), vec![d], Zeros);
    for l in 0..cfg.layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        push(p("ln1.g"), vec![d], Ones);
        push(p("ln1.b"), vec![d], Zeros);
        for w in ["q", "k", "v", "o"] {
            push(p(&format!("{w}.w")), vec![d, d], Normal);
            push(p(&format!("{w}.b")), vec![d], Zeros);
        }
        push(p("ln2.g"), vec![d], Ones);
        push(p("ln2.b"), vec![d], Zeros);
        push(p("mlp.w1"), vec![d, h], Normal);
        push(p("mlp.b1"), vec![h], Zeros);
        push(p("mlp.w2"), vec![h, d], Normal);
        push(p("mlp.b2"), vec![d], Zeros);
        // Six modulation vectors: shift/scale/gate for attention and MLP.
        push(p("ada.w"), vec![d, 6 * d], Zeros);
        push(p("ada.b"), vec![6 * d], Zeros);
    }
    push("ln_f.g".into(), vec![d], Ones);
    push("ln_f.b".into(), vec![d], Zeros);
    push("ada_f.w".into(), vec![d, 2 * d], Zeros);
    push("ada_f.b".into(), vec![2 * d], Zeros);
    push("head.w".into(), vec![d, cfg.token_dim()], Zeros);
    push("head.b".into(), vec![cfg.token_dim()], Zeros);
    out
}

/// Trainable weights of the velocity network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    cfg: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Gaussian (std 0.02) weights, zero biases and modulation, unit
    /// layer-norm gains and a zero velocity head.
    pub fn init(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(&cfg) {
            let t = match init {
                Init::Normal => rng.normal_tensor(shape, INIT_STD),
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::ones(shape),
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(ModelParams { cfg, names, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for f in self.cfg.to_fields() {
            w.write_all(&f.to_le_bytes())?;
        }
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_blob(w, t)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Reads a checkpoint; the tensor table must match the layout implied by
    /// the stored config exactly (names, order and shapes).
    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |m: String| CoreError::Checkpoint(m);
        let mut u32_at = |what: &str| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad(format!("truncated {what}")))?;
            Ok(u32::from_le_bytes(b))
        };
        let magic = u32_at("magic")?.to_le_bytes();
        if magic != CHECKPOINT_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let version = u32_at("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut fields = [0u32; 8];
        for f in fields.iter_mut() {
            *f = u32_at("config")?;
        }
        let count = u32_at("tensor count")?;
        let cfg = ModelConfig::from_fields(fields).map_err(|e| bad(e.to_string()))?;
        // Cap dimensions before trusting the layout for allocation sizes.
        if fields.iter().any(|&f| f > 4096) {
            return Err(bad("config field out of range".into()));
        }
        let expect = layout(&cfg);
        if count as usize != expect.len() {
            return Err(bad(format!("expected {} tensors, found {count}", expect.len())));
        }
        let mut names = Vec::with_capacity(expect.len());
        let mut tensors = Vec::with_capacity(expect.len());
        for (name, shape, _) in expect {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated name length".into()))?;
            let len = u32::from_le_bytes(b);
            if len > MAX_NAME_LEN {
                return Err(bad(format!("name length {len} too large")));
            }
            let mut raw = vec![0u8; len as usize];
            r.read_exact(&mut raw).map_err(|_| bad("truncated name".into()))?;
            let got = String::from_utf8(raw).map_err(|_| bad("name is not UTF-8".into()))?;
            if got != name {
                return Err(bad(format!("expected tensor {name:?}, found {got:?}")));
            }
            let t = read_blob(r).map_err(|e| bad(format!("{name}: {e}")))?;
            if t.shape() != shape.as_slice() {
                return Err(bad(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(bad(format!("{name}: non-finite values")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(ModelParams { cfg, names, tensors })
    }

    /// Parses a buffer holding exactly one checkpoint.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let p = Self::read(&mut cur)?;
        if !cur.is_empty() {
            return Err(CoreError::Checkpoint(format!("{} trailing bytes", cur.len())));
        }
        Ok(p)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn closed_form_count(c: &ModelConfig) -> usize {
        let (d, h, p) = (c.d_model, c.mlp_hidden(), c.token_dim());
        let embed = c.vocab_size * d + c.max_text_tokens * d + p * d + d + c.image_tokens() * d;
        let time = c.time_embed_dim * d + d + d * d + d;
        let block = 4 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d) + (6 * d * d + 6 * d);
        let fin = 2 * d + (2 * d * d + 2 * d) + (d * p + p);
        embed + time + c.layers * block + fin
    }

    #[test]
    fn param_count_matches_closed_form() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(p.count(), closed_form_count(&cfg));
    }

    #[test]
    fn init_is_deterministic_with_zero_head() {
        let cfg = ModelConfig::default();
        let a = ModelParams::init(cfg, &mut Rng::new(5)).unwrap();
        let b = ModelParams::init(cfg, &mut Rng::new(5)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert!(a.get("head.w").unwrap().data().iter().all(|&v| v == 0.0));
        let w = a.get("blocks.0.q.w").unwrap();
        let std = (w.data().iter().map(|v| v * v).sum::<f32>() / w.numel() as f32).sqrt();
        assert!((std - 0.02).abs() < 0.002, "{std}");
    }

    #[test]
    fn checkpoint_roundtrip_and_rejects_tampering() {
        let p = ModelParams::init(ModelConfig::default(), &mut Rng::new(1)).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(ModelParams::from_bytes(&bytes).unwrap(), p);
        assert!(ModelParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(ModelParams::from_bytes(&b).is_err());
        // Rename the first tensor.
        let mut b = bytes;
        let off = 4 + 4 + 32 + 4 + 4;
        b[off] = b'X';
        assert!(matches!(ModelParams::from_bytes(&b), Err(CoreError::Checkpoint(_))));
    }
}
