//! Retrieval metrics: R@N for both retrieval directions, the attack success
//! rate over clean-correct queries, and per-row ranking helpers shared with
//! the attack loop. All ranking is deterministic: score ties break toward the
//! smaller index.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Similarity scores between an image pool and a text pool plus the ground
/// truth matching in both directions.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    scores: Vec<Vec<f64>>,
    matched_texts: Vec<BTreeSet<usize>>,
}

impl ScoreMatrix {
    pub fn new(scores: Vec<Vec<f64>>, matched_texts: Vec<BTreeSet<usize>>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::InvalidInput("score matrix has no rows".into()));
        }
        let num_texts = scores[0].len();
        if num_texts == 0 {
            return Err(Error::InvalidInput("score matrix has no columns".into()));
        }
        if scores.len() != matched_texts.len() {
            return Err(Error::shape("ground truth rows", scores.len(), matched_texts.len()));
        }
        for (i, row) in scores.iter().enumerate() {
            if row.len() != num_texts {
                return Err(Error::shape(format!("row {i} length"), num_texts, row.len()));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("non-finite score in row {i}")));
            }
        }
        for (i, matched) in matched_texts.iter().enumerate() {
            if matched.is_empty() {
                return Err(Error::InvalidInput(format!("image {i} has no matched text")));
            }
            if let Some(&bad) = matched.iter().find(|&&j| j >= num_texts) {
                return Err(Error::InvalidInput(format!(
                    "image {i} matched to text {bad} outside pool of {num_texts}"
                )));
            }
        }
        Ok(ScoreMatrix { scores, matched_texts })
    }

    pub fn num_images(&self) -> usize {
        self.scores.len()
    }

    pub fn num_texts(&self) -> usize {
        self.scores[0].len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i]
    }

    pub fn matched_texts(&self, i: usize) -> &BTreeSet<usize> {
        &self.matched_texts[i]
    }

    /// Images matched to a text (inverse ground truth).
    pub fn matched_images(&self, text: usize) -> BTreeSet<usize> {
        self.matched_texts
            .iter()
            .enumerate()
            .filter(|(_, set)| set.contains(&text))
            .map(|(i, _)| i)
            .collect()
    }

    /// Replace one image row (used to splice attacked scores into the pool).
    pub fn with_row(&self, i: usize, row: Vec<f64>) -> Result<ScoreMatrix> {
        if row.len() != self.num_texts() {
            return Err(Error::shape("replacement row", self.num_texts(), row.len()));
        }
        let mut scores = self.scores.clone();
        scores[i] = row;
        ScoreMatrix::new(scores, self.matched_texts.clone())
    }

    fn column(&self, j: usize) -> Vec<f64> {
        self.scores.iter().map(|row| row[j]).collect()
    }

    fn same_layout(&self, other: &ScoreMatrix) -> bool {
        self.num_images() == other.num_images()
            && self.num_texts() == other.num_texts()
            && self.matched_texts == other.matched_texts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Image query over texts (TR).
    TextRetrieval,
    /// Text query over images (IR).
    ImageRetrieval,
}

/// 1-based rank of candidate `target` among `scores`, higher scores first,
/// ties broken toward the smaller index.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    let mut rank = 1;
    for (k, &v) in scores.iter().enumerate() {
        if v > s || (v == s && k < target) {
            rank += 1;
        }
    }
    rank
}

/// Whether any matched candidate lands in the top n of the score row.
pub fn hit_at_n(scores: &[f64], matched: &BTreeSet<usize>, n: usize) -> bool {
    matched.iter().any(|&j| rank_of(scores, j) <= n)
}

#[derive(Debug, Clone)]
pub struct RecallOutcome {
    pub rate: f64,
    pub hits: Vec<bool>,
}

/// R@n with per-query hit flags. TR iterates image queries over rows; IR
/// iterates text queries over columns.
pub fn recall_at_n(matrix: &ScoreMatrix, direction: Direction, n: usize) -> Result<RecallOutcome> {
    let pool = match direction {
        Direction::TextRetrieval => matrix.num_texts(),
        Direction::ImageRetrieval => matrix.num_images(),
    };
    if n == 0 || n > pool {
        return Err(Error::InvalidInput(format!("recall cutoff {n} outside [1, {pool}]")));
    }
    let hits: Vec<bool> = match direction {
        Direction::TextRetrieval => (0..matrix.num_images())
            .map(|i| hit_at_n(matrix.row(i), matrix.matched_texts(i), n))
            .collect(),
        Direction::ImageRetrieval => (0..matrix.num_texts())
            .map(|j| {
                let col = matrix.column(j);
                let matched = matrix.matched_images(j);
                hit_at_n(&col, &matched, n)
            })
            .collect(),
    };
    let rate = hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
    Ok(RecallOutcome { rate, hits })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrOutcome {
    /// None when no query was clean-correct (undefined, not zero).
    pub rate: Option<f64>,
    pub clean_correct: usize,
    pub broken: usize,
}

/// Fraction of clean-correct queries whose top-n decision is broken after the
/// attack.
pub fn attack_success_rate(
    clean: &ScoreMatrix,
    attacked: &ScoreMatrix,
    direction: Direction,
    n: usize,
) -> Result<AsrOutcome> {
    let queries: Vec<usize> = match direction {
        Direction::TextRetrieval => (0..clean.num_images()).collect(),
        Direction::ImageRetrieval => (0..clean.num_texts()).collect(),
    };
    attack_success_rate_over(clean, attacked, direction, n, &queries)
}

/// Same metric restricted to a query subset (for runs that attack only part
/// of the pool).
pub fn attack_success_rate_over(
    clean: &ScoreMatrix,
    attacked: &ScoreMatrix,
    direction: Direction,
    n: usize,
    queries: &[usize],
) -> Result<AsrOutcome> {
    if !clean.same_layout(attacked) {
        return Err(Error::InvalidInput(
            "clean and attacked matrices must share shape and ground truth".into(),
        ));
    }
    let clean_hits = recall_at_n(clean, direction, n)?.hits;
    let attacked_hits = recall_at_n(attacked, direction, n)?.hits;
    let mut clean_correct = 0usize;
    let mut broken = 0usize;
    for &q in queries {
        if q >= clean_hits.len() {
            return Err(Error::InvalidInput(format!("query {q} outside pool")));
        }
        if clean_hits[q] {
            clean_correct += 1;
            if !attacked_hits[q] {
                broken += 1;
            }
        }
    }
    let rate = (clean_correct > 0).then(|| broken as f64 / clean_correct as f64);
    Ok(AsrOutcome { rate, clean_correct, broken })
}

/// Clean recall and post-attack success rates at the standard cutoffs for one
/// retrieval direction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectionReport {
    pub recall: [f64; 3],
    pub asr: [AsrOutcome; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub num_images: usize,
    pub num_texts: usize,
    pub text_retrieval: DirectionReport,
    pub image_retrieval: DirectionReport,
}

pub const REPORT_CUTOFFS: [usize; 3] = [1, 5, 10];

/// Build the standard report. ASR queries can be restricted to the attacked
/// image subset; the induced IR subset is every text matched to one of those
/// images.
pub fn build_report(
    clean: &ScoreMatrix,
    attacked: &ScoreMatrix,
    attacked_images: Option<&[usize]>,
) -> Result<RetrievalReport> {
    let tr_queries: Vec<usize> = match attacked_images {
        Some(subset) => subset.to_vec(),
        None => (0..clean.num_images()).collect(),
    };
    let ir_queries: Vec<usize> = match attacked_images {
        Some(subset) => {
            let mut texts = BTreeSet::new();
            for &i in subset {
                texts.extend(clean.matched_texts(i).iter().copied());
            }
            texts.into_iter().collect()
        }
        None => (0..clean.num_texts()).collect(),
    };
    let mut report = RetrievalReport {
        num_images: clean.num_images(),
        num_texts: clean.num_texts(),
        text_retrieval: DirectionReport {
            recall: [0.0; 3],
            asr: std::array::from_fn(|_| AsrOutcome { rate: None, clean_correct: 0, broken: 0 }),
        },
        image_retrieval: DirectionReport {
            recall: [0.0; 3],
            asr: std::array::from_fn(|_| AsrOutcome { rate: None, clean_correct: 0, broken: 0 }),
        },
    };
    for (slot, &n) in REPORT_CUTOFFS.iter().enumerate() {
        let n_tr = n.min(clean.num_texts());
        let n_ir = n.min(clean.num_images());
        report.text_retrieval.recall[slot] =
            recall_at_n(clean, Direction::TextRetrieval, n_tr)?.rate;
        report.image_retrieval.recall[slot] =
            recall_at_n(clean, Direction::ImageRetrieval, n_ir)?.rate;
        report.text_retrieval.asr[slot] =
            attack_success_rate_over(clean, attacked, Direction::TextRetrieval, n_tr, &tr_queries)?;
        report.image_retrieval.asr[slot] =
            attack_success_rate_over(clean, attacked, Direction::ImageRetrieval, n_ir, &ir_queries)?;
    }
    Ok(report)
}

pub use crate::attack::{baseline_direct_pixel, baseline_random_location};

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(scores: Vec<Vec<f64>>, matched: Vec<Vec<usize>>) -> ScoreMatrix {
        ScoreMatrix::new(
            scores,
            matched.into_iter().map(|m| m.into_iter().collect()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn diagonal_matrix_has_perfect_recall_both_directions() {
        let m = matrix(
            vec![
                vec![1.0, 0.1, 0.2],
                vec![0.0, 1.0, 0.3],
                vec![0.2, 0.1, 1.0],
            ],
            vec![vec![0], vec![1], vec![2]],
        );
        assert_eq!(recall_at_n(&m, Direction::TextRetrieval, 1).unwrap().rate, 1.0);
        assert_eq!(recall_at_n(&m, Direction::ImageRetrieval, 1).unwrap().rate, 1.0);
    }

    #[test]
    fn rank_exactly_n_counts_as_hit() {
        // Matched text sits at rank 3 of 4.
        let m = matrix(vec![vec![0.9, 0.8, 0.7, 0.6]], vec![vec![2]]);
        assert!(!recall_at_n(&m, Direction::TextRetrieval, 2).unwrap().hits[0]);
        assert!(recall_at_n(&m, Direction::TextRetrieval, 3).unwrap().hits[0]);
    }

    #[test]
    fn hand_enumerated_two_by_four() {
        // Image 0 matched to texts {0, 3}; image 1 matched to {1}.
        // Row 0 ranks: t2 (0.9), t0 (0.8), t3 (0.4), t1 (0.1) -> best matched rank 2.
        // Row 1 ranks: t3 (0.95), t1 (0.9), t0 (0.5), t2 (0.2) -> matched rank 2.
        let m = matrix(
            vec![vec![0.8, 0.1, 0.9, 0.4], vec![0.5, 0.9, 0.2, 0.95]],
            vec![vec![0, 3], vec![1]],
        );
        assert_eq!(recall_at_n(&m, Direction::TextRetrieval, 1).unwrap().rate, 0.0);
        assert_eq!(recall_at_n(&m, Direction::TextRetrieval, 2).unwrap().rate, 1.0);
        // IR: text 0 matched to image 0: column [0.8, 0.5] -> rank 1 hit.
        // text 1 matched to image 1: column [0.1, 0.9] -> rank 1 hit.
        // text 2 matched to nobody... ground truth requires every image to
        // have matches, not every text; text 2 has no matched image.
        let ir1 = recall_at_n(&m, Direction::ImageRetrieval, 1).unwrap();
        assert!(ir1.hits[0] && ir1.hits[1]);
        // Unmatched texts never hit.
        assert!(!ir1.hits[2]);
    }

    #[test]
    fn ties_break_toward_smaller_index() {
        let m = matrix(vec![vec![0.5, 0.5, 0.5]], vec![vec![1]]);
        // Ranks: index 0 -> 1, index 1 -> 2, index 2 -> 3.
        assert!(!recall_at_n(&m, Direction::TextRetrieval, 1).unwrap().hits[0]);
        assert!(recall_at_n(&m, Direction::TextRetrieval, 2).unwrap().hits[0]);
    }

    #[test]
    fn recall_rejects_out_of_range_cutoff() {
        let m = matrix(vec![vec![1.0, 0.0]], vec![vec![0]]);
        assert!(recall_at_n(&m, Direction::TextRetrieval, 0).is_err());
        assert!(recall_at_n(&m, Direction::TextRetrieval, 3).is_err());
    }

    #[test]
    fn asr_zero_when_attack_changes_nothing() {
        let m = matrix(
            vec![vec![1.0, 0.1], vec![0.2, 0.9]],
            vec![vec![0], vec![1]],
        );
        let out = attack_success_rate(&m, &m, Direction::TextRetrieval, 1).unwrap();
        assert_eq!(out.rate, Some(0.0));
        assert_eq!(out.clean_correct, 2);
    }

    #[test]
    fn asr_one_when_all_hits_become_misses() {
        let clean = matrix(
            vec![vec![1.0, 0.1], vec![0.2, 0.9]],
            vec![vec![0], vec![1]],
        );
        let attacked = matrix(
            vec![vec![0.0, 0.8], vec![0.9, 0.1]],
            vec![vec![0], vec![1]],
        );
        let out = attack_success_rate(&clean, &attacked, Direction::TextRetrieval, 1).unwrap();
        assert_eq!(out.rate, Some(1.0));
    }

    #[test]
    fn asr_mixed_hand_case() {
        // Four image queries at n = 1; clean hits: q0, q1, q3 (q2 misses).
        // Attacked: q0 still hits, q1 misses, q3 misses -> 2 of 3 broken.
        let clean = matrix(
            vec![
                vec![0.9, 0.1, 0.1],
                vec![0.2, 0.8, 0.1],
                vec![0.9, 0.1, 0.1], // matched text 2 ranked last: clean miss
                vec![0.1, 0.2, 0.7],
            ],
            vec![vec![0], vec![1], vec![2], vec![2]],
        );
        let attacked = matrix(
            vec![
                vec![0.9, 0.1, 0.1],
                vec![0.8, 0.2, 0.1],
                vec![0.9, 0.1, 0.1],
                vec![0.7, 0.2, 0.1],
            ],
            vec![vec![0], vec![1], vec![2], vec![2]],
        );
        let out = attack_success_rate(&clean, &attacked, Direction::TextRetrieval, 1).unwrap();
        assert_eq!(out.clean_correct, 3);
        assert_eq!(out.broken, 2);
        assert!((out.rate.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn asr_undefined_with_zero_clean_correct() {
        let clean = matrix(vec![vec![0.1, 0.9]], vec![vec![0]]);
        let out = attack_success_rate(&clean, &clean, Direction::TextRetrieval, 1).unwrap();
        assert_eq!(out.rate, None);
        assert_eq!(out.clean_correct, 0);
    }

    #[test]
    fn report_restricted_to_attacked_subset() {
        let clean = matrix(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![0], vec![1]],
        );
        let attacked = clean.with_row(0, vec![0.0, 2.0]).unwrap();
        let report = build_report(&clean, &attacked, Some(&[0])).unwrap();
        assert_eq!(report.text_retrieval.asr[0].clean_correct, 1);
        assert_eq!(report.text_retrieval.asr[0].rate, Some(1.0));
    }

    proptest! {
        #[test]
        fn recall_monotone_in_n(
            rows in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 6), 4),
            matched in proptest::collection::vec(0usize..6, 4),
        ) {
            let m = matrix(rows, matched.into_iter().map(|j| vec![j]).collect());
            let mut prev = 0.0;
            for n in 1..=6 {
                let rate = recall_at_n(&m, Direction::TextRetrieval, n).unwrap().rate;
                prop_assert!(rate + 1e-12 >= prev);
                prev = rate;
            }
        }

        #[test]
        fn asr_invariant_under_monotone_transform(
            clean_rows in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 5), 3),
            attacked_rows in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 5), 3),
            matched in proptest::collection::vec(0usize..5, 3),
        ) {
            let gt: Vec<Vec<usize>> = matched.into_iter().map(|j| vec![j]).collect();
            let transform = |v: f64| (3.0 * v).exp();
            let c1 = matrix(clean_rows.clone(), gt.clone());
            let a1 = matrix(attacked_rows.clone(), gt.clone());
            let c2 = matrix(
                clean_rows.iter().map(|r| r.iter().map(|&v| transform(v)).collect()).collect(),
                gt.clone(),
            );
            let a2 = matrix(
                attacked_rows.iter().map(|r| r.iter().map(|&v| transform(v)).collect()).collect(),
                gt,
            );
            for n in 1..=3 {
                let base = attack_success_rate(&c1, &a1, Direction::TextRetrieval, n).unwrap();
                let mapped = attack_success_rate(&c2, &a2, Direction::TextRetrieval, n).unwrap();
                prop_assert_eq!(base, mapped);
            }
        }

        #[test]
        fn rates_invariant_under_text_relabeling(
            rows in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 4), 3),
            matched in proptest::collection::vec(0usize..4, 3),
        ) {
            // Relabeling changes indices, so the index tie-break makes exact
            // ties the one non-invariant case; keep scores distinct per row.
            for row in &rows {
                for a in 0..4 {
                    for b in (a + 1)..4 {
                        prop_assume!(row[a] != row[b]);
                    }
                }
            }
            let perm = [2usize, 0, 3, 1];
            let m1 = matrix(rows.clone(), matched.iter().map(|&j| vec![j]).collect());
            // Relabel text j -> perm[j] consistently in scores and ground truth.
            let relabeled: Vec<Vec<f64>> = rows
                .iter()
                .map(|row| {
                    let mut out = vec![0.0; 4];
                    for (j, &v) in row.iter().enumerate() {
                        out[perm[j]] = v;
                    }
                    out
                })
                .collect();
            let m2 = matrix(relabeled, matched.iter().map(|&j| vec![perm[j]]).collect());
            for n in 1..=4 {
                let a = recall_at_n(&m1, Direction::TextRetrieval, n).unwrap().rate;
                let b = recall_at_n(&m2, Direction::TextRetrieval, n).unwrap().rate;
                prop_assert_eq!(a, b);
            }
        }
    }
}
