//! Cross-attention maps, Gaussian smoothing and the generation-tendency
//! statistic.

use lore_tensor::{Element, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::prompt::{role_of, Role};

/// Which layers and heads to average when extracting a map; `None` = all.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub layers: Option<Vec<usize>>,
    pub heads: Option<Vec<usize>>,
}

impl ProbeConfig {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let check = |set: &Option<Vec<usize>>, limit: usize, what: &str| -> Result<()> {
            if let Some(s) = set {
                if s.is_empty() || s.iter().any(|&i| i >= limit) {
                    return Err(CoreError::Config(format!("{what} selection {s:?} invalid for {limit}")));
                }
            }
            Ok(())
        };
        check(&self.layers, cfg.layers, "layer")?;
        check(&self.heads, cfg.heads, "head")
    }

    /// Selected indices, sorted and de-duplicated so order never matters.
    fn pick(set: &Option<Vec<usize>>, n: usize) -> Vec<usize> {
        let mut v = set.clone().unwrap_or_else(|| (0..n).collect());
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Image-query × text-key attention of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    /// Per layer `[heads, image_tokens, text_tokens]`.
    pub layers: Vec<Tensor>,
    /// Prompt ids the record was produced with (padded).
    pub prompt_ids: Vec<usize>,
    pub t: f32,
}

/// One value per image token, row-major over the token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttnMap {
    pub grid: usize,
    pub values: Vec<f32>,
}

fn check_token(ids: &[usize], token: usize) -> Result<()> {
    match ids.get(token).map(|&i| role_of(i)) {
        None => Err(CoreError::Input(format!("token index {token} out of range"))),
        Some(Role::Pad | Role::Null) => Err(CoreError::Input(format!(
            "token index {token} is padding or null, not a concept"
        ))),
        Some(_) => Ok(()),
    }
}

/// Differentiable map for batch element 0 of per-layer attention
/// `[1, H, N, T]` variables: mean over the selected layers and heads of
/// column `token`.
pub fn extract_map_var<'t, T: Element>(
    attention: &[Var<'t, T>],
    prompt_ids: &[usize],
    token: usize,
    probe: &ProbeConfig,
) -> Result<Var<'t, T>> {
    check_token(prompt_ids, token)?;
    let first = attention
        .first()
        .ok_or_else(|| CoreError::Input("empty attention record".into()))?;
    let shape = first.shape();
    let (h, n, t) = (shape[1], shape[2], shape[3]);
    if token >= t {
        return Err(CoreError::Input(format!("token index {token} >= {t} text keys")));
    }
    let layers = ProbeConfig::pick(&probe.layers, attention.len());
    let heads = ProbeConfig::pick(&probe.heads, h);
    if layers.last().is_some_and(|&l| l >= attention.len()) || heads.last().is_some_and(|&x| x >= h) {
        return Err(CoreError::Config("probe selects a missing layer or head".into()));
    }
    let mut acc: Option<Var<'t, T>> = None;
    for &l in &layers {
        let col = attention[l].narrow(3, token, 1)?.reshape(vec![h, n])?;
        let part = if heads.len() == h {
            col.sum_axis(0)?
        } else {
            let mut s: Option<Var<'t, T>> = None;
            for &hd in &heads {
                let row = col.narrow(0, hd, 1)?.reshape(vec![n])?;
                s = Some(match s {
                    None => row,
                    Some(p) => p.add(row)?,
                });
            }
            s.expect("nonempty head set")
        };
        acc = Some(match acc {
            None => part,
            Some(a) => a.add(part)?,
        });
    }
    let total = (layers.len() * heads.len()) as f64;
    Ok(acc.expect("nonempty layer set").scale(T::from_f64(1.0 / total))?)
}

/// Plain-value version of [`extract_map_var`].
pub fn extract_map(record: &AttentionRecord, token: usize, probe: &ProbeConfig) -> Result<SpatialAttnMap> {
    let tape = Tape::new();
    let vars = record
        .layers
        .iter()
        .map(|t| {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            tape.constant(t.clone().reshape(s)?).map_err(CoreError::from)
        })
        .collect::<Result<Vec<_>>>()?;
    let m = extract_map_var(&vars, &record.prompt_ids, token, probe)?.value();
    let grid = (m.numel() as f64).sqrt().round() as usize;
    Ok(SpatialAttnMap {
        grid,
        values: m.into_data(),
    })
}

/// Normalised square Gaussian kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianKernel {
    pub size: usize,
    pub sigma: f32,
}

impl Default for GaussianKernel {
    fn default() -> Self {
        GaussianKernel { size: 3, sigma: 1.0 }
    }
}

impl GaussianKernel {
    pub fn validate(&self) -> Result<()> {
        if self.size % 2 == 0 || self.size > 7 || !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(CoreError::Config(format!(
                "kernel needs odd size <= 7 and sigma > 0, got {} / {}",
                self.size, self.sigma
            )));
        }
        Ok(())
    }

    /// `size × size` weights, row-major, summing to 1.
    pub fn weights(&self) -> Result<Vec<f32>> {
        self.validate()?;
        let r = (self.size / 2) as i64;
        let s2 = 2.0 * (self.sigma as f64).powi(2);
        let mut w = Vec::with_capacity(self.size * self.size);
        for dy in -r..=r {
            for dx in -r..=r {
                w.push((-((dy * dy + dx * dx) as f64) / s2).exp());
            }
        }
        let total: f64 = w.iter().sum();
        Ok(w.into_iter().map(|v| (v / total) as f32).collect())
    }

    /// Smoothing on a `grid × grid` map as an `[N, N]` matrix `S` with
    /// `out = S · in`; replicate padding is folded into the weights.
    pub fn operator(&self, grid: usize) -> Result<Tensor> {
        let w = self.weights()?;
        let r = (self.size / 2) as i64;
        let n = grid * grid;
        let g = grid as i64;
        let mut m = vec![0.0f32; n * n];
        for y in 0..g {
            for x in 0..g {
                let row = (y * g + x) as usize;
                let mut k = 0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sy = (y + dy).clamp(0, g - 1);
                        let sx = (x + dx).clamp(0, g - 1);
                        m[row * n + (sy * g + sx) as usize] += w[k];
                        k += 1;
                    }
                }
            }
        }
        Ok(Tensor::new(vec![n, n], m)?)
    }
}

/// Differentiable smoothing of an `[N]` map variable.
pub fn smooth_var<'t, T: Element>(map: Var<'t, T>, kern: &GaussianKernel, grid: usize) -> Result<Var<'t, T>> {
    let n = grid * grid;
    if map.shape() != [n] {
        return Err(CoreError::Input(format!("map shape {:?}, expected [{n}]", map.shape())));
    }
    // out = S·in, computed as in_row · Sᵀ.
    let op = kern.operator(grid)?;
    let opt = map.tape().constant(op.cast::<T>())?.transpose()?;
    Ok(map.reshape(vec![1, n])?.matmul(opt)?.reshape(vec![n])?)
}

pub fn gaussian_smooth(map: &SpatialAttnMap, kern: &GaussianKernel) -> Result<SpatialAttnMap> {
    let tape = Tape::new();
    let v = tape.constant(Tensor::new(vec![map.values.len()], map.values.clone())?)?;
    let out = smooth_var(v, kern, map.grid)?.value();
    Ok(SpatialAttnMap {
        grid: map.grid,
        values: out.into_data(),
    })
}

/// Edit region at token resolution.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenMask {
    pub grid: usize,
    pub cells: Vec<bool>,
}

impl TokenMask {
    /// A token is marked iff at least one masked pixel falls in its patch.
    pub fn from_pixels(pixels: &[bool], image_size: usize, patch: usize) -> Result<Self> {
        if pixels.len() != image_size * image_size || patch == 0 || image_size % patch != 0 {
            return Err(CoreError::Input("pixel mask does not match image geometry".into()));
        }
        let grid = image_size / patch;
        let mut cells = vec![false; grid * grid];
        for (i, &on) in pixels.iter().enumerate() {
            if on {
                let (y, x) = (i / image_size, i % image_size);
                cells[(y / patch) * grid + x / patch] = true;
            }
        }
        Ok(TokenMask { grid, cells })
    }

    pub fn full(grid: usize, value: bool) -> Self {
        TokenMask {
            grid,
            cells: vec![value; grid * grid],
        }
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn indices(&self) -> Vec<usize> {
        self.cells.iter().enumerate().filter(|(_, &c)| c).map(|(i, _)| i).collect()
    }

    /// 3×3 max-pool: grows the mask by one token in every direction.
    pub fn dilate(&self) -> Self {
        let g = self.grid as i64;
        let mut cells = vec![false; self.cells.len()];
        for y in 0..g {
            for x in 0..g {
                let hit = (-1..=1).any(|dy| {
                    (-1..=1).any(|dx| {
                        let (sy, sx) = (y + dy, x + dx);
                        sy >= 0 && sx >= 0 && sy < g && sx < g && self.cells[(sy * g + sx) as usize]
                    })
                });
                cells[(y * g + x) as usize] = hit;
            }
        }
        TokenMask { grid: self.grid, cells }
    }

    /// Per-pixel expansion at `patch` pixels per token.
    pub fn to_pixels(&self, patch: usize) -> Vec<bool> {
        let size = self.grid * patch;
        (0..size * size)
            .map(|i| self.cells[(i / size / patch) * self.grid + (i % size) / patch])
            .collect()
    }
}

/// Mean of `map` over masked tokens.
pub fn tendency(map: &SpatialAttnMap, mask: &TokenMask) -> Result<f32> {
    if mask.cells.len() != map.values.len() {
        return Err(CoreError::Input("mask and map sizes differ".into()));
    }
    let idx = mask.indices();
    if idx.is_empty() {
        return Err(CoreError::Input("tendency needs a nonempty mask".into()));
    }
    let s: f64 = idx.iter().map(|&i| map.values[i] as f64).sum();
    Ok((s / idx.len() as f64) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalised_and_symmetric() {
        let w = GaussianKernel::default().weights().unwrap();
        assert!((w.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        for i in 0..9 {
            assert_eq!(w[i], w[8 - i]);
        }
        assert!(GaussianKernel { size: 4, sigma: 1.0 }.validate().is_err());
        assert!(GaussianKernel { size: 9, sigma: 1.0 }.validate().is_err());
    }

    #[test]
    fn size_one_is_identity_and_uniform_is_fixed() {
        let m = SpatialAttnMap {
            grid: 8,
            values: (0..64).map(|i| i as f32 / 64.0).collect(),
        };
        let id = gaussian_smooth(&m, &GaussianKernel { size: 1, sigma: 1.0 }).unwrap();
        assert_eq!(id, m);
        let u = SpatialAttnMap {
            grid: 8,
            values: vec![0.25; 64],
        };
        let s = gaussian_smooth(&u, &GaussianKernel::default()).unwrap();
        assert!(s.values.iter().all(|v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn token_mask_max_pool_and_dilate() {
        let mut px = vec![false; 32 * 32];
        px[5 * 32 + 9] = true;
        let m = TokenMask::from_pixels(&px, 32, 4).unwrap();
        assert_eq!(m.indices(), vec![8 + 2]);
        assert_eq!(m.dilate().count(), 9);
        let corner = TokenMask::from_pixels(&{
            let mut p = vec![false; 1024];
            p[0] = true;
            p
        }, 32, 4)
        .unwrap();
        assert_eq!(corner.dilate().count(), 4);
    }

    #[test]
    fn tendency_is_masked_mean() {
        let m = SpatialAttnMap {
            grid: 2,
            values: vec![0.1, 0.2, 0.3, 0.6],
        };
        let mask = TokenMask {
            grid: 2,
            cells: vec![false, true, false, true],
        };
        assert!((tendency(&m, &mask).unwrap() - 0.4).abs() < 1e-7);
        assert!(tendency(&m, &TokenMask::full(2, false)).is_err());
    }
}
