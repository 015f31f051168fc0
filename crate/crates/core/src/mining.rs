//! Hard-positive mining.
//!
//! For every anchor the `K` most similar other samples are retrieved within
//! each modality: by audio embedding and by spatially pooled vision feature.
//! Everything outside those two sets (and the anchor itself) is a negative.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::VisionFeature;
use crate::error::{Error, Result};
use crate::grid::norm;

/// Channelwise mean of a vision feature map over its spatial sites.
pub fn pool_vision(v: &VisionFeature) -> Vec<f64> {
    let g = &v.0;
    let hw = g.sites();
    g.data
        .chunks(hw)
        .map(|plane| plane.iter().sum::<f64>() / hw as f64)
        .collect()
}

/// Cosine similarity of `features[i]` against every feature. Pairs with a
/// zero-norm vector score `-inf`. The entry at `i` is the self-similarity and
/// is ignored by [`top_k`].
pub fn similarity_scores(features: &[Vec<f64>], i: usize) -> Vec<f64> {
    let anchor = &features[i];
    let an = norm(anchor);
    features
        .iter()
        .map(|f| {
            let fnorm = norm(f);
            if an == 0.0 || fnorm == 0.0 {
                f64::NEG_INFINITY
            } else {
                let d: f64 = anchor.iter().zip(f).map(|(a, b)| a * b).sum();
                d / (an * fnorm)
            }
        })
        .collect()
}

/// Indices of the `min(k, n-1)` highest scores excluding `i`, best first,
/// ties broken by ascending index.
pub fn top_k(scores: &[f64], i: usize, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&j| j != i).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Per-anchor positive and negative sets, stored as 0-based dataset positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiningIndex {
    pub n: usize,
    pub k: usize,
    pub pos_audio: Vec<Vec<usize>>,
    pub pos_vision: Vec<Vec<usize>>,
    /// Sorted ascending.
    pub neg: Vec<Vec<usize>>,
}

impl MiningIndex {
    fn from_positives(n: usize, k: usize, pos_audio: Vec<Vec<usize>>, pos_vision: Vec<Vec<usize>>) -> Self {
        let neg = (0..n)
            .map(|i| {
                let mut excluded = vec![false; n];
                excluded[i] = true;
                for &j in pos_audio[i].iter().chain(&pos_vision[i]) {
                    excluded[j] = true;
                }
                (0..n).filter(|&l| !excluded[l]).collect()
            })
            .collect();
        Self {
            n,
            k,
            pos_audio,
            pos_vision,
            neg,
        }
    }

    pub fn is_negative(&self, i: usize, l: usize) -> bool {
        self.neg[i].binary_search(&l).is_ok()
    }

    /// Checks self-exclusion, set sizes and that negatives are exactly the complement.
    pub fn check_invariants(&self) -> Result<()> {
        let want = self.k.min(self.n - 1);
        for i in 0..self.n {
            for (name, set) in [("PA", &self.pos_audio[i]), ("PV", &self.pos_vision[i])] {
                if set.len() != want || set.contains(&i) || set.iter().any(|&j| j >= self.n) {
                    return Err(Error::InvalidConfig(format!("anchor {i}: bad {name} set {set:?}")));
                }
            }
            let mut covered = vec![false; self.n];
            covered[i] = true;
            for &j in self.pos_audio[i].iter().chain(&self.pos_vision[i]) {
                covered[j] = true;
            }
            let complement: Vec<usize> = (0..self.n).filter(|&l| !covered[l]).collect();
            if complement != self.neg[i] {
                return Err(Error::InvalidConfig(format!("anchor {i}: negatives are not the complement")));
            }
        }
        Ok(())
    }

    /// CSV rows `i,kind,j` with `kind` in `PA`, `PV`, `N`, using the given sample ids.
    pub fn to_csv(&self, ids: &[usize]) -> Result<String> {
        if ids.len() != self.n {
            return Err(Error::shape(format!("{} ids", self.n), ids.len()));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["i", "kind", "j"])?;
        for i in 0..self.n {
            for (kind, set) in [("PA", &self.pos_audio[i]), ("PV", &self.pos_vision[i]), ("N", &self.neg[i])] {
                for &j in set {
                    w.write_record([ids[i].to_string(), kind.to_string(), ids[j].to_string()])?;
                }
            }
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("ascii csv"))
    }

    /// Parses an index CSV against the dataset's sample ids. The stored
    /// negative rows must equal the complement of the positives.
    pub fn from_csv(text: &str, ids: &[usize]) -> Result<Self> {
        let n = ids.len();
        let pos: HashMap<usize, usize> = ids.iter().enumerate().map(|(p, &id)| (id, p)).collect();
        let mut pa = vec![Vec::new(); n];
        let mut pv = vec![Vec::new(); n];
        let mut neg = vec![Vec::new(); n];
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let headers = r.headers()?.clone();
        if headers.iter().map(str::trim).ne(["i", "kind", "j"]) {
            return Err(Error::MalformedHeader("expected CSV header `i,kind,j`".into()));
        }
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = row + 2;
            let lookup = |t: &str| -> Result<usize> {
                let id: usize = t.trim().parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("bad id {t:?}"),
                })?;
                pos.get(&id).copied().ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("unknown sample id {id}"),
                })
            };
            if rec.len() != 3 {
                return Err(Error::Parse {
                    line,
                    msg: "expected 3 fields".into(),
                });
            }
            let i = lookup(&rec[0])?;
            let j = lookup(&rec[2])?;
            match rec[1].trim() {
                "PA" => pa[i].push(j),
                "PV" => pv[i].push(j),
                "N" => neg[i].push(j),
                other => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("unknown kind {other:?}"),
                    })
                }
            }
        }
        let k = pa.first().map_or(0, Vec::len);
        if k == 0 {
            return Err(Error::InvalidConfig("index has no positives".into()));
        }
        let index = Self::from_positives(n, k, pa, pv);
        for (i, stored) in neg.iter_mut().enumerate() {
            stored.sort_unstable();
            if *stored != index.neg[i] {
                return Err(Error::InvalidConfig(format!(
                    "negatives of sample {} do not match the complement of its positives",
                    ids[i]
                )));
            }
        }
        index.check_invariants()?;
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>, ids: &[usize]) -> Result<()> {
        fs::write(path, self.to_csv(ids)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, ids: &[usize]) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?, ids)
    }
}

/// Builds the index from audio embeddings and pooled vision vectors.
pub fn build_index(audio: &[Vec<f64>], pooled_vision: &[Vec<f64>], k: usize) -> Result<MiningIndex> {
    let n = audio.len();
    if pooled_vision.len() != n {
        return Err(Error::shape(format!("{n} pooled vision vectors"), pooled_vision.len()));
    }
    if n < 3 {
        return Err(Error::InvalidConfig(format!("mining needs at least 3 samples, got {n}")));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    let pa = (0..n).map(|i| top_k(&similarity_scores(audio, i), i, k)).collect();
    let pv = (0..n)
        .map(|i| top_k(&similarity_scores(pooled_vision, i), i, k))
        .collect();
    Ok(MiningIndex::from_positives(n, k, pa, pv))
}

/// Positive sets drawn uniformly without replacement from the other samples.
pub fn random_index(n: usize, k: usize, seed: u64) -> Result<MiningIndex> {
    if n < 3 {
        return Err(Error::InvalidConfig(format!("mining needs at least 3 samples, got {n}")));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    let take = k.min(n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |i: usize| -> Vec<usize> {
        index::sample(&mut rng, n - 1, take)
            .into_iter()
            .map(|j| if j >= i { j + 1 } else { j })
            .collect()
    };
    let mut pa = Vec::with_capacity(n);
    let mut pv = Vec::with_capacity(n);
    for i in 0..n {
        pa.push(draw(i));
        pv.push(draw(i));
    }
    Ok(MiningIndex::from_positives(n, k, pa, pv))
}

/// Fraction of mined positives sharing the anchor's class, averaged over
/// anchors and both modalities.
pub fn mining_precision(index: &MiningIndex, classes: &[Option<usize>]) -> Result<f64> {
    if classes.len() != index.n {
        return Err(Error::shape(format!("{} labels", index.n), classes.len()));
    }
    let labels: Vec<usize> = classes
        .iter()
        .map(|c| c.ok_or(Error::MissingLabels))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..index.n {
        for set in [&index.pos_audio[i], &index.pos_vision[i]] {
            if set.is_empty() {
                continue;
            }
            let hits = set.iter().filter(|&&j| labels[j] == labels[i]).count();
            total += hits as f64 / set.len() as f64;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid3;
    use rand::Rng;

    #[test]
    fn pool_of_constant_planes() {
        let v = VisionFeature(Grid3::from_vec(2, 2, 2, vec![3.0, 3.0, 3.0, 3.0, -1.0, -1.0, -1.0, -1.0]).unwrap());
        assert_eq!(pool_vision(&v), vec![3.0, -1.0]);
        let single = VisionFeature(Grid3::from_vec(3, 1, 1, vec![0.1, 0.2, 0.3]).unwrap());
        assert_eq!(pool_vision(&single), vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn pool_matches_loop_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Grid3::from_vec(3, 2, 4, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let pooled = pool_vision(&VisionFeature(g.clone()));
        for c in 0..3 {
            let mut acc = 0.0;
            for y in 0..2 {
                for x in 0..4 {
                    acc += g.get(c, y, x);
                }
            }
            assert!((pooled[c] - acc / 8.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_and_orthogonal_scores() {
        let f = vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 5.0]];
        let s = similarity_scores(&f, 0);
        assert_eq!(s[1], 1.0);
        assert_eq!(s[2], 0.0);
    }

    #[test]
    fn scores_match_brute_force_and_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f: Vec<Vec<f64>> = (0..8).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        for i in 0..8 {
            let s = similarity_scores(&f, i);
            for j in 0..8 {
                let d: f64 = (0..5).map(|k| f[i][k] * f[j][k]).sum();
                let ni: f64 = f[i].iter().map(|x| x * x).sum::<f64>().sqrt();
                let nj: f64 = f[j].iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((s[j] - d / (ni * nj)).abs() < 1e-12);
                assert!((s[j] - similarity_scores(&f, j)[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_vectors_rank_last() {
        let f = vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![-1.0, 0.0]];
        let s = similarity_scores(&f, 0);
        assert_eq!(top_k(&s, 0, 2), vec![2, 1]);
    }

    #[test]
    fn top_k_examples() {
        // Anchor 0; samples 1 and 2 score 0.1 and 0.8.
        assert_eq!(top_k(&[1.0, 0.1, 0.8], 0, 1), vec![2]);
        assert_eq!(top_k(&[1.0, 0.1, 0.8], 0, 5), vec![2, 1]);
        assert_eq!(top_k(&[0.3; 4], 0, 2), vec![1, 2]);
    }

    #[test]
    fn complement_example() {
        let index = MiningIndex::from_positives(4, 1, vec![vec![1], vec![0], vec![0], vec![0]], vec![
            vec![2],
            vec![2],
            vec![1],
            vec![1],
        ]);
        assert_eq!(index.neg[0], vec![3]);
        index.check_invariants().unwrap();
    }

    #[test]
    fn saturated_k_leaves_no_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let index = build_index(&f, &f, 10).unwrap();
        assert!(index.neg.iter().all(Vec::is_empty));
        assert!(index.pos_audio.iter().all(|p| p.len() == 5));
        index.check_invariants().unwrap();
    }

    #[test]
    fn small_inputs_rejected() {
        let f = vec![vec![1.0], vec![2.0]];
        assert!(build_index(&f, &f, 1).is_err());
        assert!(random_index(2, 1, 0).is_err());
        let f = vec![vec![1.0]; 3];
        assert!(build_index(&f, &f, 0).is_err());
    }

    #[test]
    fn random_index_is_seeded_and_excludes_self() {
        let a = random_index(20, 4, 9).unwrap();
        assert_eq!(a, random_index(20, 4, 9).unwrap());
        a.check_invariants().unwrap();
    }

    #[test]
    fn duplicate_sample_is_nearest() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut f: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        f.push(f[0].clone());
        let index = build_index(&f, &f, 1).unwrap();
        let classes = vec![Some(1), Some(2), Some(3), Some(4), Some(5), Some(1)];
        assert_eq!(index.pos_audio[0], vec![5]);
        // Only the duplicated pair shares a class; check the anchor restricted score.
        let hits = index.pos_audio[0].iter().filter(|&&j| classes[j] == classes[0]).count();
        assert_eq!(hits, 1);
    }

    #[test]
    fn precision_requires_labels() {
        let index = random_index(5, 1, 0).unwrap();
        assert!(matches!(
            mining_precision(&index, &[Some(1), None, Some(1), Some(2), Some(2)]),
            Err(Error::MissingLabels)
        ));
    }

    #[test]
    fn csv_round_trip_with_ids() {
        let index = random_index(7, 2, 5).unwrap();
        let ids: Vec<usize> = (10..17).collect();
        let text = index.to_csv(&ids).unwrap();
        assert!(text.starts_with("i,kind,j\n10,"));
        assert_eq!(MiningIndex::from_csv(&text, &ids).unwrap(), index);
    }

    #[test]
    fn csv_with_wrong_negatives_is_rejected() {
        let index = random_index(5, 1, 5).unwrap();
        let ids: Vec<usize> = (1..=5).collect();
        let text = index.to_csv(&ids).unwrap();
        let trimmed: String = text.lines().filter(|l| !l.starts_with("1,N,")).map(|l| format!("{l}\n")).collect();
        assert!(MiningIndex::from_csv(&trimmed, &ids).is_err());
    }
}
