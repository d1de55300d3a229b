//! Per-task outcomes and suite aggregates.

use lore_core::edit::{EditResult, Tendencies};
use lore_core::probe::TokenMask;
use lore_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};
use crate::oracle::{argmax, Oracle};
use crate::scene::IMAGE_SIZE;
use crate::suite::EditTask;

/// Patch size of the token grid used for the background dilation.
pub const PATCH: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub id: String,
    /// Oracle probability of the target class in the edited crop.
    pub alignment: f32,
    pub success: bool,
    /// Oracle still reports the source class.
    pub retained: bool,
    /// MSE×10³ outside the dilated mask.
    pub background_mse: f32,
    pub tendencies: Tendencies,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub alignment: f64,
    pub success_rate: f64,
    pub source_retention: f64,
    pub background_mse: f64,
    pub tendency: Tendencies,
    /// Fraction of tasks whose target tendency rose during optimisation.
    pub target_tendency_up: f64,
}

/// Pixels outside the one-token dilation of the token-level mask.
pub fn background_pixels(mask: &[bool]) -> Result<Vec<bool>> {
    let tm = TokenMask::from_pixels(mask, IMAGE_SIZE, PATCH)?;
    Ok(tm.dilate().to_pixels(PATCH).into_iter().map(|m| !m).collect())
}

/// MSE×10³ between two `[32, 32, 3]` images over the pixels outside the
/// dilated mask; zero when nothing remains outside.
pub fn background_mse(edited: &Tensor, source: &Tensor, mask: &[bool]) -> Result<f32> {
    if edited.shape() != source.shape() || edited.shape() != [IMAGE_SIZE, IMAGE_SIZE, 3] {
        return Err(BenchError::Input(format!(
            "image shapes {:?} and {:?}",
            edited.shape(),
            source.shape()
        )));
    }
    let bg = background_pixels(mask)?;
    let (mut sum, mut count) = (0.0f64, 0usize);
    for (i, &keep) in bg.iter().enumerate() {
        if keep {
            for c in 0..3 {
                let d = (edited.data()[i * 3 + c] - source.data()[i * 3 + c]) as f64;
                sum += d * d;
            }
            count += 3;
        }
    }
    Ok(if count == 0 { 0.0 } else { (sum / count as f64 * 1e3) as f32 })
}

pub fn outcome(oracle: &Oracle, task: &EditTask, result: &EditResult) -> Result<TaskOutcome> {
    let probs = oracle.probs(&result.image, &task.mask)?;
    let pred = argmax(&probs);
    Ok(TaskOutcome {
        id: task.id.clone(),
        alignment: probs[task.target_class.index()],
        success: pred == task.target_class.index(),
        retained: pred == task.source_class.index(),
        background_mse: background_mse(&result.image, &task.image, &task.mask)?,
        tendencies: result.tendencies,
    })
}

/// Aggregates outcomes. Sums run in id order, so the report does not depend
/// on the order of `outcomes`.
pub fn aggregate(outcomes: &[TaskOutcome]) -> Result<MetricsReport> {
    if outcomes.is_empty() {
        return Err(BenchError::Input("no outcomes to aggregate".into()));
    }
    let mut sorted: Vec<&TaskOutcome> = outcomes.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let n = sorted.len() as f64;
    let mean = |f: &dyn Fn(&TaskOutcome) -> f64| sorted.iter().map(|o| f(o)).sum::<f64>() / n;
    let mean32 = |f: &dyn Fn(&Tendencies) -> f32| mean(&|o| f(&o.tendencies) as f64) as f32;
    Ok(MetricsReport {
        n: sorted.len(),
        alignment: mean(&|o| o.alignment as f64),
        success_rate: mean(&|o| o.success as u8 as f64),
        source_retention: mean(&|o| o.retained as u8 as f64),
        background_mse: mean(&|o| o.background_mse as f64),
        tendency: Tendencies {
            source_pre: mean32(&|t| t.source_pre),
            target_pre: mean32(&|t| t.target_pre),
            source_post: mean32(&|t| t.source_post),
            target_post: mean32(&|t| t.target_post),
        },
        target_tendency_up: mean(&|o| (o.tendencies.target_post > o.tendencies.target_pre) as u8 as f64),
    })
}

/// Scores every result against its task and aggregates.
pub fn evaluate(oracle: &Oracle, tasks: &[EditTask], results: &[EditResult]) -> Result<MetricsReport> {
    if tasks.len() != results.len() {
        return Err(BenchError::Input(format!(
            "{} tasks but {} results",
            tasks.len(),
            results.len()
        )));
    }
    let outcomes = tasks
        .iter()
        .zip(results)
        .map(|(t, r)| outcome(oracle, t, r))
        .collect::<Result<Vec<_>>>()?;
    aggregate(&outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lore_tensor::Rng;

    #[test]
    fn identical_images_have_zero_background_error() {
        let img: Tensor = Rng::new(1).uniform_tensor(vec![32, 32, 3], -1.0, 1.0);
        let mut mask = vec![false; 1024];
        mask[5 * 32 + 5] = true;
        assert_eq!(background_mse(&img, &img, &mask).unwrap(), 0.0);
    }

    #[test]
    fn dilation_hides_boundary_changes() {
        let src = Tensor::zeros(vec![32, 32, 3]);
        let mut mask = vec![false; 1024];
        mask[9 * 32 + 9] = true; // token (2, 2)
        let mut edited = src.clone();
        // Token (3, 3) is inside the dilation; token (5, 5) is not.
        edited.data_mut()[(13 * 32 + 13) * 3] = 1.0;
        assert_eq!(background_mse(&edited, &src, &mask).unwrap(), 0.0);
        edited.data_mut()[(21 * 32 + 21) * 3] = 1.0;
        let outside = 1024 - 9 * 16;
        let want = 1e3 / (outside * 3) as f64;
        assert!((background_mse(&edited, &src, &mask).unwrap() as f64 - want).abs() < 1e-6);
    }

    fn fake(id: &str, a: f32, s: bool) -> TaskOutcome {
        TaskOutcome {
            id: id.into(),
            alignment: a,
            success: s,
            retained: !s,
            background_mse: a * 3.0,
            tendencies: Tendencies {
                source_pre: a,
                target_pre: 0.1,
                source_post: a,
                target_post: 0.2,
            },
        }
    }

    #[test]
    fn aggregate_ignores_order() {
        let xs = vec![fake("a", 0.1, true), fake("b", 0.7, false), fake("c", 0.33, true)];
        let mut ys = xs.clone();
        ys.reverse();
        let (r1, r2) = (aggregate(&xs).unwrap(), aggregate(&ys).unwrap());
        assert_eq!(r1, r2);
        assert!((r1.success_rate - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r1.target_tendency_up, 1.0);
        assert!(aggregate(&[]).is_err());
    }
}
