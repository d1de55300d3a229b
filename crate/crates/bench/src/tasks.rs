//! JSON-lines task files. Each line holds one task; the source image and the
//! mask are PPM files referenced by paths relative to the task file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lore_core::prompt::Class;
use lore_core::PromptSeq;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};
use crate::ppm::{mask_from_image, mask_to_image, read_ppm, write_ppm};
use crate::scene::{SceneSpec, IMAGE_SIZE};
use crate::suite::{EditTask, SuiteKind};

/// Longest accepted line, in bytes.
pub const MAX_LINE: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub id: String,
    pub suite: SuiteKind,
    pub scene: SceneSpec,
    pub edited: usize,
    pub target_class: Class,
    pub src_prompt: String,
    pub tgt_prompt: String,
    pub image: String,
    pub mask: String,
}

fn bad(msg: impl Into<String>) -> BenchError {
    BenchError::Task(msg.into())
}

fn check_rel_path(p: &str) -> Result<()> {
    let path = Path::new(p);
    if p.is_empty() || path.is_absolute() || path.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(bad(format!("path {p:?} must be relative and stay below the task file")));
    }
    Ok(())
}

impl TaskRecord {
    pub fn from_task(task: &EditTask) -> TaskRecord {
        TaskRecord {
            id: task.id.clone(),
            suite: task.suite,
            scene: task.scene.clone(),
            edited: task.edited,
            target_class: task.target_class,
            src_prompt: task.src_prompt.to_string(),
            tgt_prompt: task.tgt_prompt.to_string(),
            image: format!("images/{}.ppm", task.id),
            mask: format!("masks/{}.ppm", task.id),
        }
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || !self.id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return Err(bad(format!("id {:?} must be nonempty [A-Za-z0-9._-]", self.id)));
        }
        self.scene.validate()?;
        let obj = self
            .scene
            .objects
            .get(self.edited)
            .ok_or_else(|| bad(format!("edited index {} out of range", self.edited)))?;
        if obj.class == self.target_class {
            return Err(bad("target class equals source class"));
        }
        let mut tgt = self.scene.clone();
        tgt.objects[self.edited].class = self.target_class;
        if PromptSeq::parse(&self.src_prompt)? != self.scene.prompt() {
            return Err(bad("src_prompt does not describe the scene"));
        }
        if PromptSeq::parse(&self.tgt_prompt)? != tgt.prompt() {
            return Err(bad("tgt_prompt does not describe the edited scene"));
        }
        check_rel_path(&self.image)?;
        check_rel_path(&self.mask)
    }
}

/// Parses and validates one line.
pub fn parse_task_line(line: &str) -> Result<TaskRecord> {
    if line.len() > MAX_LINE {
        return Err(bad(format!("line longer than {MAX_LINE} bytes")));
    }
    let rec: TaskRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
    rec.validate()?;
    Ok(rec)
}

/// Writes `tasks.jsonl` plus image and mask PPMs into `dir`.
pub fn write_tasks(dir: &Path, tasks: &[EditTask]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut text = String::new();
    for t in tasks {
        let rec = TaskRecord::from_task(t);
        write_ppm(&dir.join(&rec.image), &t.image)?;
        write_ppm(&dir.join(&rec.mask), &mask_to_image(&t.mask, IMAGE_SIZE, IMAGE_SIZE)?)?;
        writeln!(text, "{}", serde_json::to_string(&rec)?).expect("writing to a String");
    }
    let path = dir.join("tasks.jsonl");
    std::fs::write(&path, text)?;
    Ok(path)
}

/// Loads every task of a JSONL file; blank lines are skipped.
pub fn read_tasks(path: &Path) -> Result<Vec<EditTask>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_task_line(line).map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
        let image = read_ppm(&base.join(&rec.image))?;
        let mask_img = read_ppm(&base.join(&rec.mask))?;
        if image.shape() != [IMAGE_SIZE, IMAGE_SIZE, 3] || mask_img.shape() != image.shape() {
            return Err(bad(format!("line {}: images must be {IMAGE_SIZE}x{IMAGE_SIZE}", n + 1)));
        }
        let mask = mask_from_image(&mask_img);
        if !mask.iter().any(|&m| m) {
            return Err(bad(format!("line {}: empty mask", n + 1)));
        }
        let mut task = EditTask::new(rec.id, rec.suite, rec.scene, rec.edited, rec.target_class)?;
        task.image = image;
        task.mask = mask;
        out.push(task);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::suite::build_suite;

    #[test]
    fn tasks_survive_a_file_round_trip() {
        let dir = std::env::temp_dir().join(format!("lore-tasks-{}", std::process::id()));
        let tasks = build_suite(SuiteKind::SmartLike, 4, None, 2).unwrap();
        let path = write_tasks(&dir, &tasks).unwrap();
        let back = read_tasks(&path).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in tasks.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.tgt_prompt, b.tgt_prompt);
            // Images pass through 8-bit quantisation.
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 1.0 / 255.0 + 1e-6);
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn inconsistent_records_are_rejected() {
        let t = &build_suite(SuiteKind::PieLike, 1, None, 0).unwrap()[0];
        let good = TaskRecord::from_task(t);
        assert!(parse_task_line(&serde_json::to_string(&good).unwrap()).is_ok());
        let mut r = good.clone();
        r.tgt_prompt = r.src_prompt.clone();
        assert!(r.validate().is_err());
        let mut r = good.clone();
        r.image = "../escape.ppm".into();
        assert!(r.validate().is_err());
        let mut r = good.clone();
        r.edited = 3;
        assert!(r.validate().is_err());
        assert!(parse_task_line("{}").is_err());
        assert!(parse_task_line("not json").is_err());
    }
}
