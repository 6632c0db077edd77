//! Retrieval metrics and diagnostic exports.
//!
//! Rankings sort gallery items by descending cosine of pooled features;
//! ties go to the smaller gallery index.
//!
//! Export schemas:
//!
//! ```text
//! <stem>.csv   B rows of B comma-separated cosines, row = query, column = target
//! <stem>.pgm   binary P5, pixel (i, j) = round(255 * (cos_ij + 1) / 2)
//! ranks.csv    query,similarity_rank,loyalty_rank   (0 = ranked first)
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::composer::{compose, encode_target, pool, ComposerParams};
use crate::data::{subset_candidates, ModificationText, TripletDataset};
use crate::error::{IntentError, Result};
use crate::image::Image;
use crate::objectives::{cosine_matrix, diagonal_labels, loyalty_matrix, similarity_matrix, RewardOptions};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankingTable {
    pub rows: Vec<Vec<usize>>,
}

impl RankingTable {
    pub fn gallery_size(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len())
    }

    /// Position of `item` in the ranking of `query`.
    pub fn position(&self, query: usize, item: usize) -> Option<usize> {
        self.rows[query].iter().position(|g| *g == item)
    }
}

/// Pooled unit vectors of composed queries, one row per query.
pub fn embed_queries<'a>(
    params: &ComposerParams,
    queries: impl IntoIterator<Item = (&'a Image, &'a ModificationText)>,
) -> Result<Array2<f64>> {
    let rows = queries
        .into_iter()
        .map(|(img, m)| pool(&compose(params, img, m)?, params.config.pool))
        .collect::<Result<Vec<_>>>()?;
    stack(rows, params.config.dim)
}

/// Pooled unit vectors of target images.
pub fn embed_targets<'a>(
    params: &ComposerParams,
    images: impl IntoIterator<Item = &'a Image>,
) -> Result<Array2<f64>> {
    let rows = images
        .into_iter()
        .map(|img| pool(&encode_target(params, img)?, params.config.pool))
        .collect::<Result<Vec<_>>>()?;
    stack(rows, params.config.dim)
}

fn stack(rows: Vec<ndarray::Array1<f64>>, d: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((rows.len(), d));
    for (mut dst, src) in out.outer_iter_mut().zip(rows) {
        dst.assign(&src);
    }
    Ok(out)
}

/// Ranks gallery rows for each query row by cosine similarity.
pub fn rank_vectors(queries: &Array2<f64>, gallery: &Array2<f64>) -> Result<RankingTable> {
    if gallery.nrows() == 0 {
        return Err(IntentError::InvalidArgument("gallery is empty".into()));
    }
    if queries.nrows() == 0 {
        return Ok(RankingTable { rows: Vec::new() });
    }
    let cos = cosine_matrix(queries.view(), gallery.view())?;
    let rows = cos
        .outer_iter()
        .map(|row| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|a, b| row[*b].total_cmp(&row[*a]).then(a.cmp(b)));
            order
        })
        .collect();
    Ok(RankingTable { rows })
}

pub fn rank_all<'a>(
    params: &ComposerParams,
    queries: impl IntoIterator<Item = (&'a Image, &'a ModificationText)>,
    gallery: impl IntoIterator<Item = &'a Image>,
) -> Result<RankingTable> {
    let g = embed_targets(params, gallery)?;
    if g.nrows() == 0 {
        return Err(IntentError::InvalidArgument("gallery is empty".into()));
    }
    rank_vectors(&embed_queries(params, queries)?, &g)
}

fn check_k(k: usize, limit: usize) -> Result<()> {
    if k == 0 || k > limit {
        return Err(IntentError::InvalidArgument(format!("k = {k} outside 1..={limit}")));
    }
    Ok(())
}

pub fn recall_at_k(rankings: &RankingTable, truths: &[usize], k: usize) -> Result<f64> {
    check_k(k, rankings.gallery_size())?;
    if truths.len() != rankings.rows.len() {
        return Err(IntentError::Shape(format!(
            "{} truths for {} rankings",
            truths.len(),
            rankings.rows.len()
        )));
    }
    let hits = rankings
        .rows
        .iter()
        .zip(truths)
        .filter(|(row, t)| row[..k].contains(t))
        .count();
    Ok(hits as f64 / truths.len() as f64)
}

/// Recall where each query competes only within its candidate subset,
/// ordered as in the full ranking.
pub fn subset_recall_at_k(
    rankings: &RankingTable,
    subsets: &[Vec<usize>],
    truths: &[usize],
    k: usize,
) -> Result<f64> {
    if subsets.len() != rankings.rows.len() || truths.len() != subsets.len() {
        return Err(IntentError::Shape("subsets, truths and rankings differ in length".into()));
    }
    let mut hits = 0;
    for (q, (subset, truth)) in subsets.iter().zip(truths).enumerate() {
        check_k(k, subset.len())?;
        if !subset.contains(truth) {
            return Err(IntentError::InvalidArgument(format!("query {q}: truth {truth} missing from its subset")));
        }
        let truth_pos = rankings.position(q, *truth).expect("rows are permutations");
        let ahead = subset
            .iter()
            .filter(|g| **g != *truth)
            .filter(|g| rankings.position(q, **g).expect("rows are permutations") < truth_pos)
            .count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / subsets.len().max(1) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub subset_r1: f64,
    pub subset_r2: f64,
    pub subset_r3: f64,
}

pub const SUBSET_SIZE: usize = 6;

/// Validation metrics on the clean queries against the deduplicated gallery.
pub fn evaluate(params: &ComposerParams, dataset: &TripletDataset) -> Result<RetrievalMetrics> {
    let rankings = rank_all(
        params,
        dataset.validation.iter().map(|q| (&q.reference, &q.modification)),
        dataset.gallery.iter().map(|g| &g.image),
    )?;
    let truths = dataset.truths();
    let n = rankings.gallery_size();
    let subsets = subset_candidates(dataset, SUBSET_SIZE.min(n))?;
    let sub = |k: usize| subset_recall_at_k(&rankings, &subsets, &truths, k.min(SUBSET_SIZE.min(n)));
    Ok(RetrievalMetrics {
        r1: recall_at_k(&rankings, &truths, 1)?,
        r5: recall_at_k(&rankings, &truths, 5.min(n))?,
        r10: recall_at_k(&rankings, &truths, 10.min(n))?,
        subset_r1: sub(1)?,
        subset_r2: sub(2)?,
        subset_r3: sub(3)?,
    })
}

/// Raw cosine matrix between composed queries and their own targets.
pub fn cosine_heat<'a>(
    params: &ComposerParams,
    queries: impl IntoIterator<Item = (&'a Image, &'a ModificationText)>,
    targets: impl IntoIterator<Item = &'a Image>,
) -> Result<Array2<f64>> {
    let q = embed_queries(params, queries)?;
    let t = embed_targets(params, targets)?;
    if q.nrows() != t.nrows() {
        return Err(IntentError::Shape(format!("{} queries vs {} targets", q.nrows(), t.nrows())));
    }
    cosine_matrix(q.view(), t.view())
}

pub fn heat_level(cos: f64) -> u8 {
    (255.0 * (cos.clamp(-1.0, 1.0) + 1.0) / 2.0).round() as u8
}

/// Writes `<stem>.csv` and `<stem>.pgm`.
pub fn export_similarity_heat(cos: &Array2<f64>, stem: &Path) -> Result<()> {
    let csv_path = stem.with_extension("csv");
    let mut csv = String::new();
    for row in cos.outer_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    fs::write(&csv_path, csv).map_err(|e| IntentError::io(&csv_path, e))?;

    let pgm_path = stem.with_extension("pgm");
    let mut pgm = format!("P5\n{} {}\n255\n", cos.ncols(), cos.nrows()).into_bytes();
    pgm.extend(cos.iter().map(|v| heat_level(*v)));
    fs::write(&pgm_path, pgm).map_err(|e| IntentError::io(&pgm_path, e))
}

pub fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path).map_err(|e| IntentError::io(path, e))?;
    let bad = |msg: String| IntentError::Format { path: path.to_path_buf(), msg };
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|c| c.trim().parse::<f64>().map_err(|e| bad(e.to_string())))
                .collect()
        })
        .collect::<Result<_>>()?;
    let cols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != cols) {
        return Err(bad("ragged rows".into()));
    }
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).map_err(|e| bad(e.to_string()))
}

/// Position of `truth` when `values` are sorted descending, ties by index.
fn rank_of(values: ndarray::ArrayView1<f64>, truth: usize) -> usize {
    let t = values[truth];
    values
        .iter()
        .enumerate()
        .filter(|(j, v)| **v > t || (**v == t && *j < truth))
        .count()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRanks {
    pub similarity: usize,
    pub loyalty: usize,
}

/// Rank of each row's labelled target under `S` and under `L`.
pub fn loyalty_ranks(s: &Array2<f64>, l: &Array2<f64>, y: &Array2<f64>) -> Result<Vec<TruthRanks>> {
    if s.shape() != l.shape() || s.shape() != y.shape() {
        return Err(IntentError::Shape("S, L and y must share a shape".into()));
    }
    y.outer_iter()
        .enumerate()
        .map(|(i, row)| {
            let truth = row
                .iter()
                .position(|v| *v == 1.0)
                .ok_or_else(|| IntentError::InvalidArgument(format!("label row {i} has no positive")))?;
            Ok(TruthRanks {
                similarity: rank_of(s.row(i), truth),
                loyalty: rank_of(l.row(i), truth),
            })
        })
        .collect()
}

pub fn export_loyalty_ranks(s: &Array2<f64>, l: &Array2<f64>, y: &Array2<f64>, path: &Path) -> Result<Vec<TruthRanks>> {
    let ranks = loyalty_ranks(s, l, y)?;
    let mut csv = String::from("query,similarity_rank,loyalty_rank\n");
    for (i, r) in ranks.iter().enumerate() {
        csv.push_str(&format!("{i},{},{}\n", r.similarity, r.loyalty));
    }
    fs::write(path, csv).map_err(|e| IntentError::io(path, e))?;
    Ok(ranks)
}

/// Truth ranks over the whole validation split treated as one batch.
pub fn validation_truth_ranks(
    params: &ComposerParams,
    dataset: &TripletDataset,
    similarity_tau: f64,
    rewards: RewardOptions,
) -> Result<Vec<TruthRanks>> {
    let targets: Vec<&Image> = dataset.validation.iter().map(|q| &dataset.gallery[q.truth].image).collect();
    let q = embed_queries(params, dataset.validation.iter().map(|q| (&q.reference, &q.modification)))?;
    let t = embed_targets(params, targets)?;
    let s = similarity_matrix(q.view(), t.view(), similarity_tau)?;
    let y = diagonal_labels(q.nrows());
    let l = loyalty_matrix(&s.entries, &y, rewards)?;
    loyalty_ranks(&s.entries, &l.entries, &y)
}

pub fn mean_ranks(ranks: &[TruthRanks]) -> (f64, f64) {
    let n = ranks.len().max(1) as f64;
    (
        ranks.iter().map(|r| r.similarity as f64).sum::<f64>() / n,
        ranks.iter().map(|r| r.loyalty as f64).sum::<f64>() / n,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composer::ComposerConfig;
    use crate::data::DatasetConfig;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn single_item_gallery() {
        let r = rank_vectors(&random(4, 3, 1), &random(1, 3, 2)).unwrap();
        assert!(r.rows.iter().all(|row| row == &vec![0]));
        assert!(rank_vectors(&random(4, 3, 1), &Array2::zeros((0, 3))).is_err());
    }

    #[test]
    fn exact_match_ranks_first() {
        let g = random(6, 5, 3);
        let q = g.select(ndarray::Axis(0), &[4, 1]);
        let r = rank_vectors(&q, &g).unwrap();
        assert_eq!(r.rows[0][0], 4);
        assert_eq!(r.rows[1][0], 1);
    }

    #[test]
    fn ranking_matches_brute_force_sort() {
        let (q, g) = (random(5, 4, 4), random(9, 4, 5));
        let r = rank_vectors(&q, &g).unwrap();
        for (i, row) in r.rows.iter().enumerate() {
            let qi = q.row(i);
            let mut pairs: Vec<(f64, usize)> = (0..9)
                .map(|j| {
                    let gj = g.row(j);
                    (qi.dot(&gj) / (qi.dot(&qi).sqrt() * gj.dot(&gj).sqrt()), j)
                })
                .collect();
            // stable sort keeps ascending index among equal scores
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            assert_eq!(row, &pairs.iter().map(|p| p.1).collect::<Vec<_>>());
        }
    }

    #[test]
    fn ties_prefer_smaller_index() {
        let g = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let r = rank_vectors(&array![[1.0, 0.0]], &g).unwrap();
        assert_eq!(r.rows[0], vec![0, 1, 2]);
    }

    #[test]
    fn recall_examples() {
        let rows = vec![vec![0, 1, 2, 3], vec![3, 1, 2, 0], vec![1, 2, 0, 3]];
        let r = RankingTable { rows };
        // truth ranks (1, 4, 2) in 1-based terms
        assert!((recall_at_k(&r, &[0, 0, 2], 2).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(recall_at_k(&r, &[0, 0, 2], 4).unwrap(), 1.0);
        assert_eq!(recall_at_k(&r, &[0, 3, 1], 1).unwrap(), 1.0);
        assert!(recall_at_k(&r, &[0, 0, 2], 0).is_err());
        assert!(recall_at_k(&r, &[0, 0, 2], 5).is_err());
    }

    #[test]
    fn subset_recall_examples() {
        let r = RankingTable { rows: vec![vec![3, 0, 2, 1], vec![1, 0, 3, 2]] };
        let truths = [2, 3];
        // query 0: subset {2, 1} orders 2 before 1; query 1: subset {3, 0, 2} orders 0, 3, 2
        let subsets = vec![vec![2, 1], vec![3, 0, 2]];
        assert_eq!(subset_recall_at_k(&r, &subsets, &truths, 1).unwrap(), 0.5);
        assert_eq!(subset_recall_at_k(&r, &subsets, &truths, 2).unwrap(), 1.0);
        let full = vec![vec![0, 1, 2, 3]; 2];
        for k in 1..=4 {
            assert_eq!(
                subset_recall_at_k(&r, &full, &truths, k).unwrap(),
                recall_at_k(&r, &truths, k).unwrap()
            );
        }
        assert!(subset_recall_at_k(&r, &[vec![1, 0], vec![3, 0]], &truths, 1).is_err());
        assert!(subset_recall_at_k(&r, &subsets, &truths, 3).is_err());
    }

    #[test]
    fn heat_export_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cos = array![[1.0, -0.25], [0.3, -1.0]];
        let stem = dir.path().join("heat");
        export_similarity_heat(&cos, &stem).unwrap();
        let back = read_matrix_csv(&stem.with_extension("csv")).unwrap();
        assert!(back.iter().zip(cos.iter()).all(|(a, b)| (a - b).abs() < 1e-6));
        let pgm = fs::read(stem.with_extension("pgm")).unwrap();
        let body = &pgm[pgm.len() - 4..];
        let expected: Vec<u8> = cos.iter().map(|c| (255.0 * (c + 1.0) / 2.0_f64).round() as u8).collect();
        assert_eq!(body, &expected[..]);
        assert_eq!(body[0], 255);
    }

    #[test]
    fn heat_of_identical_pairs_has_bright_diagonal() {
        let cfg = ComposerConfig { image_height: 16, image_width: 16, ..Default::default() };
        let p = ComposerParams::init(&cfg).unwrap();
        let img = Image::filled(16, 16, 3, 0.3).unwrap();
        let empty = ModificationText::empty();
        let cos = cosine_heat(&p, [(&img, &empty), (&img, &empty)], [&img, &img]).unwrap();
        for i in 0..2 {
            assert_eq!(heat_level(cos[[i, i]]), 255);
        }
    }

    #[test]
    fn loyalty_rank_examples() {
        let y = diagonal_labels(3);
        let eye = Array2::<f64>::eye(3);
        let l = loyalty_matrix(&eye, &y, RewardOptions::default()).unwrap();
        assert!(loyalty_ranks(&eye, &l.entries, &y).unwrap().iter().all(|r| r.loyalty == 0));

        let s = array![[0.9, 0.1], [0.2, 0.8]];
        let y = diagonal_labels(2);
        let l = loyalty_matrix(&s, &y, RewardOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ranks.csv");
        let ranks = export_loyalty_ranks(&s, &l.entries, &y, &path).unwrap();
        assert!(ranks.iter().all(|r| r.loyalty == 0 && r.similarity == 0));
        assert_eq!(fs::read_to_string(path).unwrap(), "query,similarity_rank,loyalty_rank\n0,0,0\n1,0,0\n");
    }

    #[test]
    fn evaluate_runs_on_small_dataset() {
        let ds = crate::data::generate_dataset(&DatasetConfig { n_triplets: 40, seed: 3, ..Default::default() }).unwrap();
        let p = ComposerParams::init(&ComposerConfig::default()).unwrap();
        let m = evaluate(&p, &ds).unwrap();
        assert!(m.r1 <= m.r5 && m.r5 <= m.r10);
        assert!(m.subset_r1 <= m.subset_r2 && m.subset_r2 <= m.subset_r3);
        assert!(m.r10 <= 1.0 && m.r1 >= 0.0);
    }

    fn row_stochastic(b: usize) -> impl Strategy<Value = Array2<f64>> {
        prop::collection::vec(0.01f64..1.0, b * b).prop_map(move |v| {
            let mut m = Array2::from_shape_vec((b, b), v).unwrap();
            for mut row in m.outer_iter_mut() {
                let t = row.sum();
                row /= t;
            }
            m
        })
    }

    proptest! {
        #[test]
        fn recall_is_monotone_in_k(seed in 0u64..500) {
            let r = rank_vectors(&random(6, 3, seed), &random(8, 3, seed + 1)).unwrap();
            let truths: Vec<usize> = (0..6).map(|i| (i * 5 + seed as usize) % 8).collect();
            let mut last = 0.0;
            for k in 1..=8 {
                let v = recall_at_k(&r, &truths, k).unwrap();
                prop_assert!(v >= last);
                last = v;
            }
        }

        #[test]
        fn gallery_permutation_leaves_recall_unchanged(seed in 0u64..500) {
            let (q, g) = (random(5, 3, seed), random(7, 3, seed + 9));
            let truths: Vec<usize> = (0..5).map(|i| (i * 3 + 1) % 7).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..7).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            // shuffled[new] = g[perm[new]]
            let shuffled = g.select(ndarray::Axis(0), &perm);
            let remapped: Vec<usize> = truths.iter().map(|t| perm.iter().position(|p| p == t).unwrap()).collect();
            let a = rank_vectors(&q, &g).unwrap();
            let b = rank_vectors(&q, &shuffled).unwrap();
            for k in 1..=7 {
                prop_assert_eq!(recall_at_k(&a, &truths, k).unwrap(), recall_at_k(&b, &remapped, k).unwrap());
            }
        }

        #[test]
        fn enlarging_subsets_never_helps(seed in 0u64..500, extra in 1usize..4) {
            let r = rank_vectors(&random(4, 3, seed), &random(8, 3, seed + 3)).unwrap();
            let truths = [0, 1, 2, 3];
            let small: Vec<Vec<usize>> = truths.iter().map(|t| vec![*t, (t + 4) % 8]).collect();
            let large: Vec<Vec<usize>> = small
                .iter()
                .map(|s| {
                    let mut v = s.clone();
                    v.extend((0..8).filter(|g| !s.contains(g)).take(extra));
                    v
                })
                .collect();
            prop_assert!(
                subset_recall_at_k(&r, &large, &truths, 1).unwrap() <= subset_recall_at_k(&r, &small, &truths, 1).unwrap()
            );
        }

        /// Rewards can only move competitors ahead of the truth, never behind it.
        #[test]
        fn loyalty_rank_never_beats_similarity_rank(s in (2usize..7).prop_flat_map(row_stochastic)) {
            let y = diagonal_labels(s.nrows());
            let l = loyalty_matrix(&s, &y, RewardOptions::default()).unwrap();
            for r in loyalty_ranks(&s, &l.entries, &y).unwrap() {
                prop_assert!(r.loyalty >= r.similarity);
            }
        }
    }
}
