//! Evaluation metrics for sentiment regression and per-emotion
//! classification.
//!
//! Sentiment follows the clamp-and-round 7-class accuracy, binary accuracy
//! and F1 over samples with nonzero true label, MAE on raw predictions, and
//! Pearson correlation. Emotions are scored per class from paired logits.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const EMOTION_NAMES: [&str; 4] = ["happy", "sad", "angry", "neutral"];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SentimentMetrics {
    pub acc7: f64,
    pub acc2: f64,
    pub f1: f64,
    pub mae: f64,
    pub corr: f64,
    /// Set when either side had zero variance and `corr` was reported as 0.
    pub corr_degenerate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmotionScore {
    pub emotion: String,
    pub acc: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmotionMetrics {
    pub per_emotion: Vec<EmotionScore>,
}

fn clamp_round(v: f64) -> i64 {
    v.clamp(-3.0, 3.0).round() as i64
}

fn binary_f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Sentiment metric suite over parallel prediction/label slices.
pub fn sentiment_metrics(preds: &[f64], labels: &[f64]) -> Result<SentimentMetrics> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::LengthMismatch { left: 0, right: 0 });
    }
    let n = preds.len();

    let acc7_hits = preds
        .iter()
        .zip(labels)
        .filter(|(p, y)| clamp_round(**p) == clamp_round(**y))
        .count();
    let acc7 = acc7_hits as f64 / n as f64;

    // binary metrics exclude samples whose true label is exactly zero
    let (mut hits, mut kept) = (0usize, 0usize);
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, y) in preds.iter().zip(labels) {
        if *y == 0.0 {
            continue;
        }
        kept += 1;
        let pred_pos = *p > 0.0;
        let label_pos = *y > 0.0;
        if pred_pos == label_pos {
            hits += 1;
        }
        match (pred_pos, label_pos) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let acc2 = if kept == 0 { 0.0 } else { hits as f64 / kept as f64 };
    let f1 = binary_f1(tp, fp, fn_);

    let mae = preds
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y).abs())
        .sum::<f64>()
        / n as f64;

    let (corr, corr_degenerate) = pearson(preds, labels);
    Ok(SentimentMetrics {
        acc7,
        acc2,
        f1,
        mae,
        corr,
        corr_degenerate,
    })
}

/// Pearson correlation; zero-variance (or single-sample) input degenerates to
/// `(0, true)`.
pub fn pearson(x: &[f64], y: &[f64]) -> (f64, bool) {
    let n = x.len() as f64;
    if x.len() < 2 {
        return (0.0, true);
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return (0.0, true);
    }
    (cov / (vx.sqrt() * vy.sqrt()), false)
}

/// Per-emotion accuracy and binary F1 from `[n, 8]` logits (four softmax
/// pairs) against `[n]` four-bit labels.
pub fn emotion_metrics(logits: &[Vec<f64>], labels: &[[u8; 4]]) -> Result<EmotionMetrics> {
    if logits.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: logits.len(),
            right: labels.len(),
        });
    }
    if logits.is_empty() {
        return Err(Error::LengthMismatch { left: 0, right: 0 });
    }
    if let Some(row) = logits.iter().find(|r| r.len() != 8) {
        return Err(Error::ShapeMismatch(format!(
            "emotion logits must have 8 entries per sample, got {}",
            row.len()
        )));
    }
    let mut per_emotion = Vec::with_capacity(4);
    for (g, name) in EMOTION_NAMES.iter().enumerate() {
        let (mut hits, mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
        for (row, label) in logits.iter().zip(labels) {
            // argmax over the pair; ties resolve to class 0
            let pred = u8::from(row[2 * g + 1] > row[2 * g]);
            let truth = label[g];
            if pred == truth {
                hits += 1;
            }
            match (pred, truth) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => {}
            }
        }
        per_emotion.push(EmotionScore {
            emotion: name.to_string(),
            acc: hits as f64 / logits.len() as f64,
            f1: binary_f1(tp, fp, fn_),
        });
    }
    Ok(EmotionMetrics { per_emotion })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_predictions_score_perfectly() {
        let v = [-3.0, -1.0, 0.0, 2.0];
        let m = sentiment_metrics(&v, &v).unwrap();
        assert_eq!(m.acc7, 1.0);
        assert_eq!(m.mae, 0.0);
        assert!((m.corr - 1.0).abs() < 1e-12);
        assert!(!m.corr_degenerate);
    }

    #[test]
    fn hand_computed_mixed_case() {
        let preds = [1.2, -0.5, 0.3];
        let labels = [2.0, -1.0, -2.0];
        let m = sentiment_metrics(&preds, &labels).unwrap();
        assert!((m.acc2 - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.mae - (0.8 + 0.5 + 2.3) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn acc7_clamps_before_rounding() {
        let m = sentiment_metrics(&[5.0], &[3.0]).unwrap();
        assert_eq!(m.acc7, 1.0);
        let m = sentiment_metrics(&[-4.2], &[-3.0]).unwrap();
        assert_eq!(m.acc7, 1.0);
    }

    #[test]
    fn zero_labels_do_not_affect_binary_metrics() {
        // the zero-labeled sample would be a wrong sign prediction if counted
        let with_zero = sentiment_metrics(&[1.0, -1.0, -5.0], &[2.0, -2.0, 0.0]).unwrap();
        let without = sentiment_metrics(&[1.0, -1.0], &[2.0, -2.0]).unwrap();
        assert_eq!(with_zero.acc2, without.acc2);
        assert_eq!(with_zero.f1, without.f1);
        assert_eq!(with_zero.acc2, 1.0);
    }

    #[test]
    fn degenerate_correlation_flagged_as_zero() {
        let m = sentiment_metrics(&[1.0, 1.0, 1.0], &[0.5, -0.5, 1.5]).unwrap();
        assert_eq!(m.corr, 0.0);
        assert!(m.corr_degenerate);
        let m = sentiment_metrics(&[0.7], &[0.5]).unwrap();
        assert!(m.corr_degenerate);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(matches!(
            sentiment_metrics(&[1.0], &[1.0, 2.0]),
            Err(Error::LengthMismatch { left: 1, right: 2 })
        ));
    }

    #[test]
    fn perfect_and_inverted_emotion_predictions() {
        let labels = [[1, 0, 1, 0], [0, 1, 0, 1]];
        let perfect: Vec<Vec<f64>> = labels
            .iter()
            .map(|l| {
                l.iter()
                    .flat_map(|&b| if b == 1 { [0.0, 5.0] } else { [5.0, 0.0] })
                    .collect()
            })
            .collect();
        let m = emotion_metrics(&perfect, &labels).unwrap();
        for s in &m.per_emotion {
            assert_eq!(s.acc, 1.0);
            assert_eq!(s.f1, 1.0);
        }

        let all_pos = [[1, 1, 1, 1], [1, 1, 1, 1]];
        let all_neg_logits = vec![vec![5.0, 0.0, 5.0, 0.0, 5.0, 0.0, 5.0, 0.0]; 2];
        let m = emotion_metrics(&all_neg_logits, &all_pos).unwrap();
        for s in &m.per_emotion {
            assert_eq!(s.acc, 0.0);
            assert_eq!(s.f1, 0.0);
        }
    }

    #[test]
    fn hand_checked_emotion_case() {
        // four samples, emotion 0 ("happy") only:
        // preds 1,0,1,0 vs labels 1,1,0,0 -> acc 1/2, tp=1 fp=1 fn=1, f1=1/2
        let labels = [[1, 0, 0, 0], [1, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]];
        let rest = [0.0, -1.0, 0.0, -1.0, 0.0, -1.0];
        let mk = |pos: bool| -> Vec<f64> {
            let mut row = if pos { vec![0.0, 3.0] } else { vec![3.0, 0.0] };
            row.extend_from_slice(&rest);
            row
        };
        let logits = vec![mk(true), mk(false), mk(true), mk(false)];
        let m = emotion_metrics(&logits, &labels).unwrap();
        assert_eq!(m.per_emotion[0].acc, 0.5);
        assert_eq!(m.per_emotion[0].f1, 0.5);
        // remaining emotions: preds all 0, labels all 0 -> acc 1, f1 0
        for s in &m.per_emotion[1..] {
            assert_eq!(s.acc, 1.0);
            assert_eq!(s.f1, 0.0);
        }
    }
}
