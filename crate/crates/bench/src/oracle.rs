//! Alignment oracle: a two-layer MLP classifying the 16×16 cell crop that
//! holds most of a mask into one of the 36 (shape, colour) classes.

use std::io::{Read, Write};
use std::path::Path;

use lore_core::prompt::Class;
use lore_tensor::{read_blob, write_blob, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};
use crate::scene::{gen_scene, SceneSpec, IMAGE_SIZE};

pub const ORACLE_MAGIC: [u8; 4] = *b"LORO";
pub const ORACLE_VERSION: u32 = 1;
pub const CROP: usize = 16;
pub const INPUT: usize = CROP * CROP * 3;
pub const HIDDEN: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct Oracle {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleTrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Uniform-noise crops per step, pushed towards the uniform distribution.
    pub noise_batch: usize,
    pub noise_weight: f32,
    pub lr: f32,
    pub seed: u64,
    /// Held-out clean crops used by the accuracy gate.
    pub holdout: usize,
    pub min_accuracy: f32,
    /// Upper bound on any class probability for a uniform-noise crop.
    pub max_noise_prob: f32,
}

impl Default for OracleTrainConfig {
    fn default() -> Self {
        OracleTrainConfig {
            steps: 3000,
            batch: 64,
            noise_batch: 32,
            noise_weight: 4.0,
            lr: 1e-3,
            seed: 1,
            holdout: 2000,
            min_accuracy: 0.98,
            max_noise_prob: 3.0 / Class::COUNT as f32,
        }
    }
}

/// Outcome of the post-training checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub accuracy: f32,
    /// Largest class probability over uniform-noise crops.
    pub noise_max_prob: f32,
}

/// Cell (row-major in the 2×2 layout) holding the most masked pixels; ties
/// go to the lower index.
pub fn mask_cell(mask: &[bool]) -> Result<usize> {
    if mask.len() != IMAGE_SIZE * IMAGE_SIZE {
        return Err(BenchError::Input(format!("mask has {} pixels", mask.len())));
    }
    let mut counts = [0usize; 4];
    for (i, &m) in mask.iter().enumerate() {
        if m {
            let (y, x) = (i / IMAGE_SIZE, i % IMAGE_SIZE);
            counts[(y / CROP) * 2 + x / CROP] += 1;
        }
    }
    let best = (0..4).fold(0, |b, c| if counts[c] > counts[b] { c } else { b });
    if counts[best] == 0 {
        return Err(BenchError::Input("empty mask".into()));
    }
    Ok(best)
}

pub fn cell_crop(image: &Tensor, cell: usize) -> Result<Vec<f32>> {
    if image.shape() != [IMAGE_SIZE, IMAGE_SIZE, 3] || cell >= 4 {
        return Err(BenchError::Input(format!("crop of cell {cell} from image {:?}", image.shape())));
    }
    let (r0, c0) = ((cell / 2) * CROP, (cell % 2) * CROP);
    let mut out = Vec::with_capacity(INPUT);
    for y in r0..r0 + CROP {
        let at = (y * IMAGE_SIZE + c0) * 3;
        out.extend_from_slice(&image.data()[at..at + CROP * 3]);
    }
    Ok(out)
}

fn logits<'t>(tape: &'t Tape, vars: &[Var<'t>; 4], x: Tensor) -> Result<Var<'t>> {
    let x = tape.constant(x)?;
    Ok(x.matmul(vars[0])?.add(vars[1])?.relu()?.matmul(vars[2])?.add(vars[3])?)
}

fn labelled_batch(rng: &mut Rng, n: usize) -> Result<(Tensor, Vec<usize>)> {
    let mut xs = Vec::with_capacity(n * INPUT);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let spec = SceneSpec::random(rng, 1, 3);
        let scene = gen_scene(&spec)?;
        let o = spec.objects[0];
        xs.extend(cell_crop(&scene.image, o.cell.index())?);
        ys.push(o.class.index());
    }
    Ok((Tensor::new(vec![n, INPUT], xs)?, ys))
}

impl Oracle {
    pub fn init(rng: &mut Rng) -> Oracle {
        Oracle {
            w1: rng.normal_tensor(vec![INPUT, HIDDEN], (2.0 / INPUT as f64).sqrt()),
            b1: Tensor::zeros(vec![HIDDEN]),
            w2: rng.normal_tensor(vec![HIDDEN, Class::COUNT], (1.0 / HIDDEN as f64).sqrt()),
            b2: Tensor::zeros(vec![Class::COUNT]),
        }
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    /// Trains, then applies the accuracy gate; fails if the gate is missed.
    pub fn train(cfg: &OracleTrainConfig) -> Result<(Oracle, OracleReport)> {
        let mut rng = Rng::new(cfg.seed);
        let mut oracle = Oracle::init(&mut rng.derive(0));
        let mut m: Vec<Vec<f32>> = oracle.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        let mut v = m.clone();
        let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
        let tape = Tape::new();
        for step in 1..=cfg.steps {
            let (x, y) = labelled_batch(&mut rng, cfg.batch)?;
            let noise: Tensor = rng.uniform_tensor(vec![cfg.noise_batch, INPUT], -1.0, 1.0);
            tape.reset();
            let vars = oracle.tensors().map(|t| tape.param(t.clone()).expect("finite weights"));
            let lp = logits(&tape, &vars, x)?.log_softmax_lastdim()?;
            let picks: Vec<usize> = y.iter().enumerate().map(|(i, &c)| i * Class::COUNT + c).collect();
            let ce = lp.gather(&picks)?.mean()?.neg()?;
            let loss = if cfg.noise_batch > 0 {
                let ln = logits(&tape, &vars, noise)?.log_softmax_lastdim()?;
                ce.add(ln.mean()?.neg()?.scale(cfg.noise_weight)?)?
            } else {
                ce
            };
            tape.backward(loss)?;
            let (c1, c2) = (1.0 - b1.powi(step as i32), 1.0 - b2.powi(step as i32));
            let grads: Vec<Tensor> = vars.iter().map(|v| v.grad().expect("parameter grad")).collect();
            for (k, t) in [&mut oracle.w1, &mut oracle.b1, &mut oracle.w2, &mut oracle.b2].into_iter().enumerate() {
                for (i, w) in t.data_mut().iter_mut().enumerate() {
                    let g = grads[k].data()[i];
                    m[k][i] = b1 * m[k][i] + (1.0 - b1) * g;
                    v[k][i] = b2 * v[k][i] + (1.0 - b2) * g * g;
                    *w -= cfg.lr * (m[k][i] / c1) / ((v[k][i] / c2).sqrt() + eps);
                }
            }
        }
        let report = oracle.check(cfg)?;
        if report.accuracy < cfg.min_accuracy {
            return Err(BenchError::Oracle(format!(
                "held-out accuracy {:.4} below gate {}",
                report.accuracy, cfg.min_accuracy
            )));
        }
        if report.noise_max_prob >= cfg.max_noise_prob {
            return Err(BenchError::Oracle(format!(
                "noise crop probability {:.4} above calibration bound {:.4}",
                report.noise_max_prob, cfg.max_noise_prob
            )));
        }
        Ok((oracle, report))
    }

    /// Held-out accuracy and noise calibration, on streams disjoint from
    /// training.
    pub fn check(&self, cfg: &OracleTrainConfig) -> Result<OracleReport> {
        let mut rng = Rng::new(cfg.seed).derive(1);
        let (x, y) = labelled_batch(&mut rng, cfg.holdout)?;
        let p = self.probs_batch(&x)?;
        let correct = p
            .data()
            .chunks(Class::COUNT)
            .zip(&y)
            .filter(|(row, &c)| argmax(row) == c)
            .count();
        let noise: Tensor = rng.uniform_tensor(vec![500, INPUT], -1.0, 1.0);
        let pn = self.probs_batch(&noise)?;
        let noise_max_prob = pn.data().iter().fold(0.0f32, |a, &b| a.max(b));
        Ok(OracleReport {
            accuracy: correct as f32 / y.len().max(1) as f32,
            noise_max_prob,
        })
    }

    /// Class probabilities for rows of `[B, 768]` crops.
    pub fn probs_batch(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.tensors().map(|t| tape.constant(t.clone()).expect("finite weights"));
        Ok(logits(&tape, &vars, x.clone())?.softmax_lastdim()?.value())
    }

    /// Class distribution for the crop selected by `mask`.
    pub fn probs(&self, image: &Tensor, mask: &[bool]) -> Result<Vec<f32>> {
        let crop = cell_crop(image, mask_cell(mask)?)?;
        Ok(self.probs_batch(&Tensor::new(vec![1, INPUT], crop)?)?.into_data())
    }

    pub fn score(&self, image: &Tensor, mask: &[bool], class: Class) -> Result<f32> {
        Ok(self.probs(image, mask)?[class.index()])
    }

    pub fn predict(&self, image: &Tensor, mask: &[bool]) -> Result<Class> {
        Ok(Class::from_index(argmax(&self.probs(image, mask)?)).expect("36 outputs"))
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&ORACLE_MAGIC)?;
        w.write_all(&ORACLE_VERSION.to_le_bytes())?;
        for t in self.tensors() {
            write_blob(w, t)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Oracle> {
        let mut head = [0u8; 8];
        r.read_exact(&mut head)
            .map_err(|_| BenchError::OracleFile("truncated header".into()))?;
        if head[..4] != ORACLE_MAGIC {
            return Err(BenchError::OracleFile("bad magic".into()));
        }
        let version = u32::from_le_bytes(head[4..].try_into().expect("4 bytes"));
        if version != ORACLE_VERSION {
            return Err(BenchError::OracleFile(format!("unsupported version {version}")));
        }
        let shapes: [&[usize]; 4] = [&[INPUT, HIDDEN], &[HIDDEN], &[HIDDEN, Class::COUNT], &[Class::COUNT]];
        let mut ts = Vec::with_capacity(4);
        for want in shapes {
            let t = read_blob(r).map_err(|e| BenchError::OracleFile(e.to_string()))?;
            if t.shape() != want {
                return Err(BenchError::OracleFile(format!("tensor shape {:?}, expected {want:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(BenchError::OracleFile("non-finite weight".into()));
            }
            ts.push(t);
        }
        let mut it = ts.into_iter();
        let mut next = || it.next().expect("four tensors");
        Ok(Oracle {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Oracle> {
        let mut r = bytes;
        let o = Oracle::read(&mut r)?;
        if !r.is_empty() {
            return Err(BenchError::OracleFile(format!("{} trailing bytes", r.len())));
        }
        Ok(o)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Oracle> {
        Oracle::from_bytes(&std::fs::read(path)?)
    }
}

pub fn argmax(xs: &[f32]) -> usize {
    (0..xs.len()).fold(0, |b, i| if xs[i] > xs[b] { i } else { b })
}
