use serde::{Deserialize, Serialize};

use crate::data::EventLabel;
use crate::N_CLASSES;

/// Tolerances for matching a predicted event to a reference event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Collars {
    /// Seconds.
    pub onset: f64,
    /// Fraction of the reference duration.
    pub offset_frac: f64,
}

impl Default for Collars {
    fn default() -> Self {
        Self {
            onset: 0.2,
            offset_frac: 0.2,
        }
    }
}

/// Slack for floating-point round-off in the collar comparisons.
const EPS: f64 = 1e-9;

/// Whether `pred` may be matched to `reference`.
pub fn events_match(pred: &EventLabel, reference: &EventLabel, collars: Collars) -> bool {
    let off_collar = collars.onset.max(collars.offset_frac * reference.duration());
    pred.class_id == reference.class_id
        && (pred.onset - reference.onset).abs() <= collars.onset + EPS
        && (pred.offset - reference.offset).abs() <= off_collar + EPS
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassScores {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassScores {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }

    /// A class with neither references nor predictions has no defined score.
    pub fn is_active(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_class: Vec<ClassScores>,
    /// Unweighted mean over active classes (0 when no class is active).
    pub macro_f1: f64,
    /// Scores of the pooled counts over all classes.
    pub micro: ClassScores,
}

/// Size of a maximum matching in the bipartite graph `adj[pred] = refs`
/// (augmenting paths).
fn max_matching(adj: &[Vec<usize>], n_refs: usize) -> usize {
    fn augment(p: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &r in &adj[p] {
            if seen[r] {
                continue;
            }
            seen[r] = true;
            let free = match owner[r] {
                None => true,
                Some(q) => augment(q, adj, seen, owner),
            };
            if free {
                owner[r] = Some(p);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; n_refs];
    let mut size = 0;
    for p in 0..adj.len() {
        let mut seen = vec![false; n_refs];
        if augment(p, adj, &mut seen, &mut owner) {
            size += 1;
        }
    }
    size
}

/// Event-based scores over a set of clips; `predicted[i]` and `reference[i]`
/// belong to the same clip. Within each clip and class, predictions and
/// references are paired one-to-one so that the number of matches is as
/// large as possible; unmatched predictions are false positives and
/// unmatched references are misses.
pub fn event_f1(predicted: &[Vec<EventLabel>], reference: &[Vec<EventLabel>], collars: Collars) -> F1Report {
    assert_eq!(predicted.len(), reference.len(), "event_f1: clip count mismatch");
    let mut tp = [0usize; N_CLASSES];
    let mut n_pred = [0usize; N_CLASSES];
    let mut n_ref = [0usize; N_CLASSES];
    for (pred, refs) in predicted.iter().zip(reference) {
        for c in 0..N_CLASSES {
            let p: Vec<&EventLabel> = pred.iter().filter(|e| e.class_id == c).collect();
            let r: Vec<&EventLabel> = refs.iter().filter(|e| e.class_id == c).collect();
            n_pred[c] += p.len();
            n_ref[c] += r.len();
            if p.is_empty() || r.is_empty() {
                continue;
            }
            let adj: Vec<Vec<usize>> = p
                .iter()
                .map(|pe| (0..r.len()).filter(|&j| events_match(pe, r[j], collars)).collect())
                .collect();
            tp[c] += max_matching(&adj, r.len());
        }
    }
    let per_class: Vec<ClassScores> = (0..N_CLASSES)
        .map(|c| ClassScores::from_counts(tp[c], n_pred[c] - tp[c], n_ref[c] - tp[c]))
        .collect();
    let active: Vec<f64> = per_class.iter().filter(|s| s.is_active()).map(|s| s.f1).collect();
    let macro_f1 = if active.is_empty() {
        0.0
    } else {
        active.iter().sum::<f64>() / active.len() as f64
    };
    let (t, p, r): (usize, usize, usize) = (tp.iter().sum(), n_pred.iter().sum(), n_ref.iter().sum());
    F1Report {
        per_class,
        macro_f1,
        micro: ClassScores::from_counts(t, p - t, r - t),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(c: usize, on: f64, off: f64) -> EventLabel {
        EventLabel::new(c, on, off).unwrap()
    }

    #[test]
    fn identical_lists_score_one() {
        let x = vec![vec![ev(0, 1.0, 2.0), ev(3, 4.0, 6.5), ev(3, 7.0, 8.0)]];
        let r = event_f1(&x, &x, Collars::default());
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.micro.f1, 1.0);
    }

    #[test]
    fn empty_prediction_scores_zero() {
        let refs = vec![vec![ev(0, 1.0, 2.0)]];
        let r = event_f1(&[vec![]], &refs, Collars::default());
        assert_eq!(r.macro_f1, 0.0);
        assert_eq!(r.per_class[0].fn_, 1);
    }

    #[test]
    fn collar_example_matches() {
        let r = event_f1(&[vec![ev(2, 1.10, 2.05)]], &[vec![ev(2, 1.0, 2.0)]], Collars::default());
        assert_eq!(r.macro_f1, 1.0);
    }

    #[test]
    fn offset_collar_scales_with_duration() {
        let refs = vec![vec![ev(1, 0.0, 5.0)]];
        // 0.2 × 5 s = 1 s offset tolerance
        let near = event_f1(&[vec![ev(1, 0.1, 5.9)]], &refs, Collars::default());
        let far = event_f1(&[vec![ev(1, 0.1, 6.1)]], &refs, Collars::default());
        assert_eq!(near.macro_f1, 1.0);
        assert_eq!(far.macro_f1, 0.0);
    }

    #[test]
    fn duplicates_become_false_positives() {
        let refs = vec![vec![ev(0, 1.0, 2.0)]];
        let preds = vec![vec![ev(0, 1.0, 2.0), ev(0, 1.05, 2.0)]];
        let r = event_f1(&preds, &refs, Collars::default());
        assert_eq!((r.per_class[0].tp, r.per_class[0].fp), (1, 1));
    }

    #[test]
    fn matching_is_maximal_not_greedy() {
        // greedy in list order would pair p0 with r0 and leave r1 unmatched
        let refs = vec![vec![ev(0, 1.0, 2.0), ev(0, 1.3, 2.3)]];
        let preds = vec![vec![ev(0, 1.15, 2.15), ev(0, 0.85, 1.85)]];
        let r = event_f1(&preds, &refs, Collars::default());
        assert_eq!(r.per_class[0].tp, 2);
    }

    #[test]
    fn clips_do_not_match_across() {
        let refs = vec![vec![ev(0, 1.0, 2.0)], vec![]];
        let preds = vec![vec![], vec![ev(0, 1.0, 2.0)]];
        assert_eq!(event_f1(&preds, &refs, Collars::default()).per_class[0].tp, 0);
    }
}
