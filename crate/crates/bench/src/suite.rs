//! Edit-task suites: single-object replacement (pie-like), one instance among
//! look-alikes (smart-like) and maximally distant targets (gap-like).

use lore_core::edit::EditRequest;
use lore_core::prompt::{Background, Cell, Class};
use lore_core::probe::TokenMask;
use lore_core::{ModelConfig, ModelParams, PromptSeq};
use lore_tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};
use crate::scene::{gen_scene, ObjectSpec, SceneSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteKind {
    PieLike,
    SmartLike,
    GapLike,
}

impl SuiteKind {
    pub const ALL: [SuiteKind; 3] = [SuiteKind::PieLike, SuiteKind::SmartLike, SuiteKind::GapLike];

    pub fn name(self) -> &'static str {
        match self {
            SuiteKind::PieLike => "pie-like",
            SuiteKind::SmartLike => "smart-like",
            SuiteKind::GapLike => "gap-like",
        }
    }

    pub fn from_name(s: &str) -> Option<SuiteKind> {
        SuiteKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl std::fmt::Display for SuiteKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One edit: replace object `edited` of `scene` by `target_class`.
#[derive(Clone, Debug)]
pub struct EditTask {
    pub id: String,
    pub suite: SuiteKind,
    pub scene: SceneSpec,
    pub edited: usize,
    pub source_class: Class,
    pub target_class: Class,
    /// `[32, 32, 3]`.
    pub image: Tensor,
    /// Footprint of the edited object, row-major 32×32.
    pub mask: Vec<bool>,
    pub src_prompt: PromptSeq,
    pub tgt_prompt: PromptSeq,
}

/// Prompt slot probed for an edit: the shape word of the edited object, or
/// its colour word when only the colour changes.
pub fn edit_token(scene: &SceneSpec, edited: usize, source: Class, target: Class) -> usize {
    let cell = scene.objects[edited].cell;
    let rank = scene.objects.iter().filter(|o| o.cell < cell).count();
    let base = 1 + 3 * rank;
    if source.shape != target.shape {
        base + 1
    } else {
        base
    }
}

impl EditTask {
    /// Builds the task from its scene, rasterising the source image.
    pub fn new(
        id: String,
        suite: SuiteKind,
        scene: SceneSpec,
        edited: usize,
        target_class: Class,
    ) -> Result<EditTask> {
        let obj = *scene
            .objects
            .get(edited)
            .ok_or_else(|| BenchError::Suite(format!("edited index {edited} out of range")))?;
        if obj.class == target_class {
            return Err(BenchError::Suite("target class equals source class".into()));
        }
        let rendered = gen_scene(&scene)?;
        let mut tgt_scene = scene.clone();
        tgt_scene.objects[edited].class = target_class;
        Ok(EditTask {
            id,
            suite,
            edited,
            source_class: obj.class,
            target_class,
            image: rendered.image,
            mask: rendered.masks[edited].clone(),
            src_prompt: rendered.prompt,
            tgt_prompt: tgt_scene.prompt(),
            scene,
        })
    }

    pub fn token(&self) -> usize {
        edit_token(&self.scene, self.edited, self.source_class, self.target_class)
    }

    pub fn request(&self, cfg: &ModelConfig) -> Result<EditRequest> {
        let mask = TokenMask::from_pixels(&self.mask, cfg.image_size, cfg.patch)?;
        Ok(EditRequest {
            image: self.image.clone(),
            mask,
            src_prompt: self.src_prompt.clone(),
            tgt_prompt: self.tgt_prompt.clone(),
            target_token: self.token(),
            source_token: self.token(),
        })
    }
}

fn class_embedding(params: &ModelParams, c: Class) -> Result<Vec<f64>> {
    let table = params
        .get("tok_emb")
        .ok_or_else(|| BenchError::Suite("checkpoint has no token embedding".into()))?;
    let d = table.shape()[1];
    let row = |tok: usize| -> Result<&[f32]> {
        table
            .data()
            .get(tok * d..(tok + 1) * d)
            .ok_or_else(|| BenchError::Suite(format!("token {tok} outside the embedding table")))
    };
    let (s, k) = (row(c.shape.token())?, row(c.color.token())?);
    Ok(s.iter().zip(k).map(|(&a, &b)| (a as f64 + b as f64) / 2.0).collect())
}

/// `1 − cos` between the mean shape+colour token embeddings of two classes.
pub fn semantic_gap(params: &ModelParams, a: Class, b: Class) -> Result<f32> {
    if a == b {
        return Ok(0.0);
    }
    let (ea, eb) = (class_embedding(params, a)?, class_embedding(params, b)?);
    let dot: f64 = ea.iter().zip(&eb).map(|(x, y)| x * y).sum();
    let na = ea.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = eb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(1.0);
    }
    Ok((1.0 - dot / (na * nb)) as f32)
}

/// Class farthest from `src` by [`semantic_gap`]; ties go to the lower index.
pub fn gap_target(params: &ModelParams, src: Class) -> Result<Class> {
    let mut best: Option<(f32, Class)> = None;
    for c in Class::all().filter(|&c| c != src) {
        let g = semantic_gap(params, src, c)?;
        if best.is_none_or(|(bg, _)| g > bg) {
            best = Some((g, c));
        }
    }
    Ok(best.expect("35 candidates").1)
}

/// Scene layout without jitter: objects, background, edited index, target.
type Skeleton = (Vec<ObjectSpec>, Background, usize, Class);

fn skeletons(kind: SuiteKind, params: Option<&ModelParams>) -> Result<Vec<Skeleton>> {
    let mut out = Vec::new();
    match kind {
        SuiteKind::PieLike => {
            for class in Class::all() {
                for &cell in Cell::ALL {
                    for &bg in Background::ALL {
                        for target in Class::all().filter(|&t| t != class) {
                            out.push((vec![ObjectSpec { class, cell }], bg, 0, target));
                        }
                    }
                }
            }
        }
        SuiteKind::SmartLike => {
            let subsets: Vec<Vec<Cell>> = (0u8..16)
                .filter(|m| (2..=3).contains(&m.count_ones()))
                .map(|m| Cell::ALL.iter().copied().filter(|c| m & (1 << c.index()) != 0).collect())
                .collect();
            for class in Class::all() {
                for cells in &subsets {
                    let objects: Vec<ObjectSpec> = cells.iter().map(|&cell| ObjectSpec { class, cell }).collect();
                    for edited in 0..objects.len() {
                        for &bg in Background::ALL {
                            for target in Class::all().filter(|&t| t != class) {
                                out.push((objects.clone(), bg, edited, target));
                            }
                        }
                    }
                }
            }
        }
        SuiteKind::GapLike => {
            let params =
                params.ok_or_else(|| BenchError::Suite("gap-like suites need trained model parameters".into()))?;
            for class in Class::all() {
                let target = gap_target(params, class)?;
                for &cell in Cell::ALL {
                    for &bg in Background::ALL {
                        out.push((vec![ObjectSpec { class, cell }], bg, 0, target));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `n` distinct tasks of one kind, sampled without replacement from every
/// possible (layout, background, edited object, target) combination.
pub fn build_suite(kind: SuiteKind, n: usize, params: Option<&ModelParams>, seed: u64) -> Result<Vec<EditTask>> {
    let mut pool = skeletons(kind, params)?;
    if n > pool.len() {
        return Err(BenchError::Suite(format!(
            "{kind} has {} distinct tasks, {n} requested",
            pool.len()
        )));
    }
    let mut rng = Rng::new(seed).derive(kind as u64);
    rng.shuffle(&mut pool);
    pool.truncate(n);
    pool.into_iter()
        .enumerate()
        .map(|(i, (objects, background, edited, target))| {
            let scene = SceneSpec {
                objects,
                background,
                seed: rng.derive(1_000 + i as u64).next_u64(),
            };
            EditTask::new(format!("{kind}-{i:04}"), kind, scene, edited, target)
        })
        .collect()
}
