//! The velocity network: a small DiT over the joint `[text; image]` token
//! sequence with AdaLN time conditioning.

use std::collections::HashMap;

use lore_tensor::{Element, Tape, Tensor, Var};

use crate::config::{ModelConfig, CHANNELS};
use crate::error::{CoreError, Result};
use crate::params::ModelParams;
use crate::prompt::PromptSeq;

const LN_EPS: f64 = 1e-5;

/// Image `[H, W, 3]` → token grid `[N, P·P·3]`; tokens row-major over the
/// patch grid, each token row-major over its pixels with channels innermost.
pub fn patchify(cfg: &ModelConfig, image: &Tensor) -> Result<Tensor> {
    let s = cfg.image_size;
    if image.shape() != [s, s, CHANNELS] {
        return Err(CoreError::Input(format!(
            "expected image [{s}, {s}, {CHANNELS}], got {:?}",
            image.shape()
        )));
    }
    let (p, g) = (cfg.patch, cfg.grid());
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for ty in 0..g {
        for tx in 0..g {
            for py in 0..p {
                let row = (ty * p + py) * s + tx * p;
                out.extend_from_slice(&src[row * CHANNELS..(row + p) * CHANNELS]);
            }
        }
    }
    Ok(Tensor::new(vec![cfg.image_tokens(), cfg.token_dim()], out)?)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(cfg: &ModelConfig, tokens: &Tensor) -> Result<Tensor> {
    if tokens.shape() != [cfg.image_tokens(), cfg.token_dim()] {
        return Err(CoreError::Input(format!(
            "expected tokens [{}, {}], got {:?}",
            cfg.image_tokens(),
            cfg.token_dim(),
            tokens.shape()
        )));
    }
    let (s, p, g) = (cfg.image_size, cfg.patch, cfg.grid());
    let src = tokens.data();
    let mut out = vec![0.0f32; src.len()];
    let mut at = 0;
    for ty in 0..g {
        for tx in 0..g {
            for py in 0..p {
                let row = (ty * p + py) * s + tx * p;
                out[row * CHANNELS..(row + p) * CHANNELS].copy_from_slice(&src[at..at + p * CHANNELS]);
                at += p * CHANNELS;
            }
        }
    }
    Ok(Tensor::new(vec![s, s, CHANNELS], out)?)
}

/// Sinusoidal embedding of `t·1000`: `[cos(ω_k t), sin(ω_k t)]`.
pub fn time_embedding(t: f32, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let a = t as f64 * 1000.0 * freq;
        out[k] = a.cos() as f32;
        out[half + k] = a.sin() as f32;
    }
    out
}

/// Which internals a forward pass should expose.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Record {
    pub attention: bool,
    pub values: bool,
}

/// Replacement of image-token value rows inside every layer.
#[derive(Clone, Copy, Debug)]
pub struct Injection<'a> {
    /// Per layer, `[B, image_tokens, d_model]` rows to substitute.
    pub values: &'a [Tensor],
    /// Per image token: `true` keeps the live row, `false` takes the cached one.
    pub keep: &'a [bool],
}

pub struct ForwardOut<'t, T: Element = f32> {
    /// `[B, image_tokens, token_dim]`.
    pub velocity: Var<'t, T>,
    /// Per layer, the image-query × text-key block `[B, H, image_tokens, text]`
    /// of the post-softmax attention.
    pub attention: Vec<Var<'t, T>>,
    /// Per layer, the image-token value rows `[B, image_tokens, d_model]`
    /// actually used by attention (after any injection).
    pub values: Vec<Tensor<T>>,
}

/// Parameters placed on a tape. `f64` tapes exist for finite-difference checks.
pub struct Bound<'t, T: Element = f32> {
    cfg: ModelConfig,
    vars: HashMap<String, Var<'t, T>>,
    order: Vec<Var<'t, T>>,
}

impl<'t, T: Element> Bound<'t, T> {
    /// Binds every parameter; `trainable` decides whether they receive grads.
    pub fn new(tape: &'t Tape<T>, params: &ModelParams, trainable: bool) -> Result<Self> {
        let mut vars = HashMap::new();
        let mut order = Vec::new();
        for (name, t) in params.names().iter().zip(params.tensors()) {
            let v = tape.leaf(t.cast::<T>(), trainable)?;
            vars.insert(name.clone(), v);
            order.push(v);
        }
        Ok(Bound {
            cfg: *params.config(),
            vars,
            order,
        })
    }

    /// Variables in checkpoint order.
    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.order
    }

    fn get(&self, name: &str) -> Var<'t, T> {
        self.vars[name]
    }

    fn linear(&self, x: Var<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
        Ok(x.matmul(self.get(&format!("{prefix}.w")))?.add(self.get(&format!("{prefix}.b")))?)
    }

    /// Runs the network on a batch. `z` is `[B, image_tokens, token_dim]`.
    pub fn forward(
        &self,
        z: Var<'t, T>,
        prompts: &[&PromptSeq],
        ts: &[f32],
        record: Record,
        inject: Option<Injection<'_>>,
    ) -> Result<ForwardOut<'t, T>> {
        let cfg = &self.cfg;
        let tape = z.tape();
        let b = prompts.len();
        let (n_txt, n_img, d) = (cfg.max_text_tokens, cfg.image_tokens(), cfg.d_model);
        let seq = n_txt + n_img;
        if z.shape() != [b, n_img, cfg.token_dim()] {
            return Err(CoreError::Input(format!(
                "latent shape {:?}, expected [{b}, {n_img}, {}]",
                z.shape(),
                cfg.token_dim()
            )));
        }
        if ts.len() != b {
            return Err(CoreError::Input("one timestep per batch element required".into()));
        }
        if let Some(&t) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(CoreError::Input(format!("timestep {t} outside [0, 1]")));
        }
        let mut ids = Vec::with_capacity(b * n_txt);
        for p in prompts {
            ids.extend(p.padded(n_txt, cfg.vocab_size)?);
        }
        let keep_rows: Option<(Vec<bool>, &[Tensor])> = match inject {
            None => None,
            Some(inj) => {
                if inj.keep.len() != n_img || inj.values.len() != cfg.layers {
                    return Err(CoreError::Input(format!(
                        "injection needs {n_img} keep flags and {} layers",
                        cfg.layers
                    )));
                }
                let mut keep = Vec::with_capacity(b * seq);
                for _ in 0..b {
                    keep.extend(std::iter::repeat(true).take(n_txt));
                    keep.extend_from_slice(inj.keep);
                }
                Some((keep, inj.values))
            }
        };

        // Time conditioning.
        let mut temb = Vec::with_capacity(b * cfg.time_embed_dim);
        for &t in ts {
            temb.extend(time_embedding(t, cfg.time_embed_dim).into_iter().map(T::from_f32));
        }
        let temb = tape.constant(Tensor::new(vec![b, cfg.time_embed_dim], temb)?)?;
        let c = temb
            .matmul(self.get("time.w1"))?
            .add(self.get("time.b1"))?
            .silu()?
            .matmul(self.get("time.w2"))?
            .add(self.get("time.b2"))?;
        let c_act = c.silu()?.reshape(vec![b, 1, d])?;

        // Token embeddings.
        let txt = tape
            .embedding(self.get("tok_emb"), &ids)?
            .reshape(vec![b, n_txt, d])?
            .add(self.get("txt_pos"))?;
        let img = self.linear(z, "patch_in")?.add(self.get("img_pos"))?;
        let mut x = tape.concat(&[txt, img], 1)?;

        let (h, dh) = (cfg.heads, cfg.head_dim());
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (one, ln_eps) = (T::one(), T::from_f64(LN_EPS));
        let mut attention = Vec::new();
        let mut values = Vec::new();
        for l in 0..cfg.layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            let m = c_act.matmul(self.get(&p("ada.w")))?.add(self.get(&p("ada.b")))?;
            let chunk = |i: usize| m.narrow(2, i * d, d);
            let (sh1, sc1, g1, sh2, sc2, g2) = (chunk(0)?, chunk(1)?, chunk(2)?, chunk(3)?, chunk(4)?, chunk(5)?);

            let y = x
                .layer_norm(Some(self.get(&p("ln1.g"))), Some(self.get(&p("ln1.b"))), ln_eps)?
                .mul(sc1.add_scalar(one)?)?
                .add(sh1)?;
            let heads = |v: Var<'t, T>, perm: &[usize]| -> Result<Var<'t, T>> {
                Ok(v.reshape(vec![b, seq, h, dh])?.permute(perm)?)
            };
            let q = heads(self.linear(y, &p("q"))?, &[0, 2, 1, 3])?;
            let kt = heads(self.linear(y, &p("k"))?, &[0, 2, 3, 1])?;
            let mut v = self.linear(y, &p("v"))?;
            if let Some((keep, cache)) = &keep_rows {
                let rep = expand_image_rows(&cache[l].cast::<T>(), b, n_txt, n_img, d)?;
                v = v.replace_rows(keep, &rep)?;
            }
            if record.values {
                values.push(image_rows(&v.value(), b, n_txt, n_img, d)?);
            }
            let vh = heads(v, &[0, 2, 1, 3])?;
            let a = q.bmm(kt)?.scale(scale)?.softmax_lastdim()?;
            if record.attention {
                attention.push(a.narrow(2, n_txt, n_img)?.narrow(3, 0, n_txt)?);
            }
            let o = a.bmm(vh)?.permute(&[0, 2, 1, 3])?.reshape(vec![b, seq, d])?;
            x = x.add(self.linear(o, &p("o"))?.mul(g1)?)?;

            let y = x
                .layer_norm(Some(self.get(&p("ln2.g"))), Some(self.get(&p("ln2.b"))), ln_eps)?
                .mul(sc2.add_scalar(one)?)?
                .add(sh2)?;
            let hid = y.matmul(self.get(&p("mlp.w1")))?.add(self.get(&p("mlp.b1")))?.gelu()?;
            let f = hid.matmul(self.get(&p("mlp.w2")))?.add(self.get(&p("mlp.b2")))?;
            x = x.add(f.mul(g2)?)?;
        }

        let mf = c_act.matmul(self.get("ada_f.w"))?.add(self.get("ada_f.b"))?;
        let (shf, scf) = (mf.narrow(2, 0, d)?, mf.narrow(2, d, d)?);
        let velocity = x
            .narrow(1, n_txt, n_img)?
            .layer_norm(Some(self.get("ln_f.g")), Some(self.get("ln_f.b")), ln_eps)?
            .mul(scf.add_scalar(one)?)?
            .add(shf)?;
        let velocity = self.linear(velocity, "head")?;
        Ok(ForwardOut {
            velocity,
            attention,
            values,
        })
    }
}

/// `[B, S, D]` → image rows `[B, N, D]`.
fn image_rows<T: Element>(v: &Tensor<T>, b: usize, n_txt: usize, n_img: usize, d: usize) -> Result<Tensor<T>> {
    let seq = n_txt + n_img;
    let mut out = Vec::with_capacity(b * n_img * d);
    for i in 0..b {
        out.extend_from_slice(&v.data()[(i * seq + n_txt) * d..(i + 1) * seq * d]);
    }
    Ok(Tensor::new(vec![b, n_img, d], out)?)
}

/// Image rows `[B, N, D]` → `[B, S, D]` with zero text rows.
fn expand_image_rows<T: Element>(rows: &Tensor<T>, b: usize, n_txt: usize, n_img: usize, d: usize) -> Result<Tensor<T>> {
    if rows.shape() != [b, n_img, d] {
        return Err(CoreError::Input(format!(
            "cached values {:?}, expected [{b}, {n_img}, {d}]",
            rows.shape()
        )));
    }
    let seq = n_txt + n_img;
    let mut out = vec![T::zero(); b * seq * d];
    for i in 0..b {
        out[(i * seq + n_txt) * d..(i + 1) * seq * d].copy_from_slice(&rows.data()[i * n_img * d..(i + 1) * n_img * d]);
    }
    Ok(Tensor::new(vec![b, seq, d], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lore_tensor::Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            heads: 2,
            layers: 2,
            time_embed_dim: 16,
            ..ModelConfig::default()
        }
    }

    fn lively(cfg: ModelConfig) -> ModelParams {
        let mut p = ModelParams::init(cfg, &mut Rng::new(1)).unwrap();
        let mut rng = Rng::new(2);
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.normal() * 0.3;
            }
        }
        p
    }

    fn run(p: &ModelParams, z: &Tensor, prompts: &[&PromptSeq], ts: &[f32], record: Record) -> (Tensor, Vec<Tensor>) {
        let tape = Tape::<f32>::new();
        let bound = Bound::new(&tape, p, false).unwrap();
        let cfg = p.config();
        let zv = tape
            .constant(z.clone().reshape(vec![prompts.len(), cfg.image_tokens(), cfg.token_dim()]).unwrap())
            .unwrap();
        let out = bound.forward(zv, prompts, ts, record, None).unwrap();
        (out.velocity.value(), out.attention.iter().map(|a| a.value()).collect())
    }

    #[test]
    fn patchify_round_trips_and_places_pixels() {
        let cfg = ModelConfig::default();
        let img = Tensor::from_fn(vec![32, 32, 3], |i| i as f32);
        let tok = patchify(&cfg, &img).unwrap();
        // Token (1, 2), pixel (3, 1), channel 2.
        let (y, x) = (4 + 3, 8 + 1);
        assert_eq!(tok.data()[(8 + 2) * 48 + (3 * 4 + 1) * 3 + 2], ((y * 32 + x) * 3 + 2) as f32);
        assert!(unpatchify(&cfg, &tok).unwrap().bit_eq(&img));
    }

    #[test]
    fn fresh_model_predicts_zero_velocity() {
        let cfg = small();
        let p = ModelParams::init(cfg, &mut Rng::new(3)).unwrap();
        let z: Tensor = Rng::new(4).normal_tensor(vec![cfg.image_tokens(), cfg.token_dim()], 1.0);
        let prompt = PromptSeq::parse("gray red circle top-left").unwrap();
        let (v, _) = run(&p, &z, &[&prompt], &[0.4], Record::default());
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn recording_attention_does_not_perturb_output() {
        let cfg = small();
        let p = lively(cfg);
        let z: Tensor = Rng::new(5).normal_tensor(vec![cfg.image_tokens(), cfg.token_dim()], 1.0);
        let prompt = PromptSeq::parse("checker cyan ring bottom-left").unwrap();
        let (plain, none) = run(&p, &z, &[&prompt], &[0.7], Record::default());
        let rec = Record {
            attention: true,
            values: true,
        };
        let (probed, att) = run(&p, &z, &[&prompt], &[0.7], rec);
        assert!(none.is_empty());
        assert!(plain.bit_eq(&probed));
        assert_eq!(att.len(), cfg.layers);
        assert_eq!(att[0].shape(), [1, cfg.heads, cfg.image_tokens(), cfg.max_text_tokens]);
        // Text columns are part of a full softmax row over text and image keys.
        for row in att[1].data().chunks(cfg.max_text_tokens) {
            let s: f32 = row.iter().sum();
            assert!(row.iter().all(|&a| a >= 0.0) && s <= 1.0 + 1e-6 && s > 0.0);
        }
    }

    #[test]
    fn batched_forward_matches_single() {
        let cfg = small();
        let p = lively(cfg);
        let (n, c) = (cfg.image_tokens(), cfg.token_dim());
        let z: Tensor = Rng::new(6).normal_tensor(vec![2 * n, c], 1.0);
        let a = PromptSeq::parse("black red circle top-left").unwrap();
        let b = PromptSeq::null(cfg.max_text_tokens);
        let (both, _) = run(&p, &z, &[&a, &b], &[0.2, 0.9], Record::default());
        let half = |i: usize| Tensor::new(vec![n, c], z.data()[i * n * c..(i + 1) * n * c].to_vec()).unwrap();
        let (va, _) = run(&p, &half(0), &[&a], &[0.2], Record::default());
        let (vb, _) = run(&p, &half(1), &[&b], &[0.9], Record::default());
        for (x, y) in both.data().iter().zip(va.data().iter().chain(vb.data())) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = small();
        let p = lively(cfg);
        let tape = Tape::<f32>::new();
        let bound = Bound::new(&tape, &p, false).unwrap();
        let prompt = PromptSeq::parse("gray red circle top-left").unwrap();
        let z = tape.constant(Tensor::zeros(vec![1, cfg.image_tokens(), cfg.token_dim()])).unwrap();
        assert!(bound.forward(z, &[&prompt], &[1.5], Record::default(), None).is_err());
        assert!(bound.forward(z, &[&prompt, &prompt], &[0.5, 0.5], Record::default(), None).is_err());
    }
}
