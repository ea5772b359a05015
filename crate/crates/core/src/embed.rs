//! Character embeddings read out of the ViT decoder, plus cosine similarity,
//! spherical k-means and the radical-retrieval score.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Result, SaeError};
use crate::strokegen::Image;
use crate::tensor::Tensor;
use crate::vit::VitModel;

/// Decoder block whose output tokens serve as embeddings.
pub const EMBED_BLOCK: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharEmbedding {
    pub label: String,
    /// Stroke count used to pick the token.
    pub m: usize,
    pub vector: Vec<f64>,
}

/// Token `m` (1-based) of the sequence after decoder block 3.
pub fn embed_character(model: &VitModel, label: &str, image: &Image, m: usize) -> Result<CharEmbedding> {
    if m == 0 || m > model.config.pad_len {
        return Err(SaeError::Range(format!("stroke count {m} outside 1..={}", model.config.pad_len)));
    }
    let mut g = Graph::new();
    let x = g.constant(model.batch_tokens(&[image])?);
    let out = model.forward(&mut g, x, Some(EMBED_BLOCK))?;
    let tokens = g.value(out.captured.expect("capture requested"));
    let d = model.config.width;
    let vector = tokens.data()[(m - 1) * d..m * d].to_vec();
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(SaeError::Numeric(format!("non-finite embedding for `{label}`")));
    }
    Ok(CharEmbedding { label: label.to_string(), m, vector })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(SaeError::dim(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(SaeError::Numeric("cosine of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `[|a|, |b|]` matrix of pairwise cosines.
pub fn cosine_matrix(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Tensor> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for x in a {
        for y in b {
            out.push(cosine(x, y)?);
        }
    }
    Tensor::new(vec![a.len(), b.len()], out)
}

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 {
        return Err(SaeError::Numeric("cannot normalize a zero vector".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    /// Unit-norm centroids.
    pub centroids: Vec<Vec<f64>>,
    /// Sum of cosines to the assigned centroid after each iteration.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

/// Spherical k-means. Points are unit-normalized; each is assigned to the
/// centroid with the highest cosine (lowest index on ties) and centroids are
/// the normalized member means. A cluster left empty is re-seeded with the
/// point least similar to its own centroid.
pub fn kmeans_cosine(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    if k == 0 || k > points.len() {
        return Err(SaeError::Range(format!("k = {k} for {} points", points.len())));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(SaeError::dim("points of unequal length"));
    }
    let x: Vec<Vec<f64>> = points.iter().map(|p| normalized(p)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.shuffle(&mut rng);
    let mut centroids: Vec<Vec<f64>> = order[..k].iter().map(|&i| x[i].clone()).collect();
    let mut assignments = vec![usize::MAX; x.len()];
    let mut objective = Vec::new();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let next: Vec<usize> = x
            .iter()
            .map(|p| {
                let mut best = (0, f64::NEG_INFINITY);
                for (c, mu) in centroids.iter().enumerate() {
                    let s = dot(p, mu);
                    if s > best.1 {
                        best = (c, s);
                    }
                }
                best.0
            })
            .collect();
        let stable = next == assignments;
        assignments = next;
        if stable {
            objective.push(score(&x, &assignments, &centroids));
            break;
        }
        centroids = update_centroids(&x, &mut assignments, k, &centroids, d)?;
        objective.push(score(&x, &assignments, &centroids));
    }
    Ok(KMeans { assignments, centroids, objective, iterations })
}

fn score(x: &[Vec<f64>], assign: &[usize], centroids: &[Vec<f64>]) -> f64 {
    x.iter().zip(assign).map(|(p, &c)| dot(p, &centroids[c])).sum()
}

fn update_centroids(
    x: &[Vec<f64>],
    assign: &mut [usize],
    k: usize,
    old: &[Vec<f64>],
    d: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut counts = vec![0usize; k];
    for &c in assign.iter() {
        counts[c] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let far = (0..x.len())
            .filter(|&i| counts[assign[i]] > 1)
            .min_by(|&i, &j| dot(&x[i], &old[assign[i]]).total_cmp(&dot(&x[j], &old[assign[j]])));
        if let Some(i) = far {
            counts[assign[i]] -= 1;
            assign[i] = c;
            counts[c] = 1;
        }
    }
    let mut sums = vec![vec![0.0; d]; k];
    for (p, &c) in x.iter().zip(assign.iter()) {
        for (s, v) in sums[c].iter_mut().zip(p) {
            *s += v;
        }
    }
    Ok(sums
        .iter()
        .zip(old)
        .map(|(s, o)| normalized(s).unwrap_or_else(|_| o.clone()))
        .collect())
}

/// CSV with header `label,m,d0..d{n-1}`.
pub fn export_embeddings(path: impl AsRef<Path>, embeddings: &[CharEmbedding]) -> Result<()> {
    let path = path.as_ref();
    let d = embeddings.first().map_or(0, |e| e.vector.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["label".to_string(), "m".to_string()];
    header.extend((0..d).map(|i| format!("d{i}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for e in embeddings {
        if e.vector.len() != d {
            return Err(SaeError::dim(format!("`{}` has width {}, expected {d}", e.label, e.vector.len())));
        }
        let mut row = vec![e.label.clone(), e.m.to_string()];
        row.extend(e.vector.iter().map(|v| format!("{v:e}")));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| SaeError::io(path, e))
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<CharEmbedding>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = |msg: String| SaeError::Parse { context: format!("{}:{}", path.display(), i + 2), message: msg };
        let label = rec.get(0).ok_or_else(|| bad("missing label".into()))?.to_string();
        let m = rec.get(1).unwrap_or("").parse().map_err(|e| bad(format!("stroke count: {e}")))?;
        let vector = rec
            .iter()
            .skip(2)
            .map(|v| v.parse::<f64>().map_err(|e| bad(format!("value `{v}`: {e}"))))
            .collect::<Result<_>>()?;
        out.push(CharEmbedding { label, m, vector });
    }
    Ok(out)
}

/// Similarity matrix as CSV: a header of column labels, then one row per
/// row label.
pub fn export_similarity(path: impl AsRef<Path>, rows: &[String], cols: &[String], sim: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (r, c) = sim.dims2()?;
    if r != rows.len() || c != cols.len() {
        return Err(SaeError::dim(format!("{r}x{c} matrix for {} rows and {} columns", rows.len(), cols.len())));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec![String::new()];
    header.extend(cols.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (i, label) in rows.iter().enumerate() {
        let mut row = vec![label.clone()];
        row.extend(sim.data()[i * c..(i + 1) * c].iter().map(|v| format!("{v:e}")));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| SaeError::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> SaeError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SaeError::io(path, io),
        other => SaeError::Parse { context: path.display().to_string(), message: format!("{other:?}") },
    }
}

/// Mean reciprocal rank of each row's best true column. `sim` is
/// `[chars, radicals]`; ties count against the true column.
pub fn mean_reciprocal_rank(sim: &Tensor, truth: &[Vec<usize>]) -> Result<f64> {
    let (r, c) = sim.dims2()?;
    if truth.len() != r {
        return Err(SaeError::dim(format!("{} truth rows for {r} characters", truth.len())));
    }
    let mut total = 0.0;
    for (i, t) in truth.iter().enumerate() {
        let row = &sim.data()[i * c..(i + 1) * c];
        total += 1.0 / best_rank(row, t)? as f64;
    }
    Ok(total / r as f64)
}

/// 1-based rank of the best-scoring true column among all columns.
fn best_rank(row: &[f64], truth: &[usize]) -> Result<usize> {
    let mut best = usize::MAX;
    for &j in truth {
        let s = *row.get(j).ok_or_else(|| SaeError::Range(format!("radical {j} of {}", row.len())))?;
        let rank = 1 + row.iter().enumerate().filter(|&(k, &v)| k != j && v >= s).count();
        best = best.min(rank);
    }
    if best == usize::MAX {
        return Err(SaeError::Data("character without a true radical".into()));
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShuffleControl {
    pub mrr: f64,
    pub shuffled_mrr: Vec<f64>,
    /// Shuffles whose MRR the true assignment beats strictly.
    pub wins: usize,
}

/// Compares the true radical assignment against `shuffles` random
/// relabellings of the radical columns.
pub fn shuffle_control(sim: &Tensor, truth: &[Vec<usize>], shuffles: usize, seed: u64) -> Result<ShuffleControl> {
    let (_, c) = sim.dims2()?;
    let mrr = mean_reciprocal_rank(sim, truth)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled_mrr = Vec::with_capacity(shuffles);
    for _ in 0..shuffles {
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut rng);
        let t: Vec<Vec<usize>> = truth.iter().map(|t| t.iter().map(|&j| perm[j]).collect()).collect();
        shuffled_mrr.push(mean_reciprocal_rank(sim, &t)?);
    }
    let wins = shuffled_mrr.iter().filter(|&&s| mrr > s).count();
    Ok(ShuffleControl { mrr, shuffled_mrr, wins })
}

/// Random unit vector, for tests and controls.
pub fn random_direction<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        if let Ok(u) = normalized(&v) {
            return u;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strokegen::{default_stroke_width, render_full, synthetic_alphabet};
    use crate::vit::VitConfig;
    use proptest::prelude::*;

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(SaeError::Numeric(_))));
        assert!(matches!(cosine(&[1.0], &[1.0, 0.0]), Err(SaeError::Dimension(_))));
    }

    #[test]
    fn embedding_is_read_only_and_depends_on_m() {
        let cfg = VitConfig { width: 16, heads: 2, ..VitConfig::desk() };
        let model = VitModel::new(cfg, 3).unwrap();
        let before = model.params.clone();
        let alpha = synthetic_alphabet(4, 4, 1).unwrap();
        let spec = &alpha.chars[0];
        let img = render_full(spec, 56, default_stroke_width(56)).unwrap();
        let a = embed_character(&model, "x", &img, 3).unwrap();
        let b = embed_character(&model, "x", &img, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.vector.len(), 16);
        let c = embed_character(&model, "x", &img, 4).unwrap();
        assert_ne!(a.vector, c.vector);
        assert!(matches!(embed_character(&model, "x", &img, 0), Err(SaeError::Range(_))));
        assert!(matches!(embed_character(&model, "x", &img, 9), Err(SaeError::Range(_))));
        for (name, p) in before.iter() {
            assert_eq!(model.params.get(name).unwrap(), &p.value);
        }
    }

    #[test]
    fn kmeans_single_cluster_is_mean_direction() {
        let pts = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 3.0]];
        let km = kmeans_cosine(&pts, 1, 0, 10).unwrap();
        assert_eq!(km.assignments, vec![0, 0, 0]);
        let s = 1.0 + 1.0 / 2f64.sqrt();
        let mean = normalized(&[s, s]).unwrap();
        for (a, b) in km.centroids[0].iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        assert!(kmeans_cosine(&[vec![1.0]], 2, 0, 5).is_err());
        assert!(kmeans_cosine(&[vec![1.0]], 0, 0, 5).is_err());
    }

    #[test]
    fn embeddings_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        let es = vec![
            CharEmbedding { label: "甲".into(), m: 5, vector: vec![0.1, -2.5e-7, 3.0] },
            CharEmbedding { label: "b,c".into(), m: 1, vector: vec![1.0 / 3.0, 0.0, -1e300] },
        ];
        export_embeddings(&p, &es).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("label,m,d0,d1,d2\n"));
        assert_eq!(load_embeddings(&p).unwrap(), es);
        assert!(matches!(load_embeddings(dir.path().join("missing.csv")), Err(SaeError::Io { .. })));
    }

    #[test]
    fn reciprocal_rank_uses_best_true_column() {
        let sim = Tensor::new(vec![2, 3], vec![0.9, 0.5, 0.1, 0.2, 0.3, 0.8]).unwrap();
        // Row 0: true {1, 2} → best rank 2. Row 1: true {2} → rank 1.
        let mrr = mean_reciprocal_rank(&sim, &[vec![1, 2], vec![2]]).unwrap();
        assert!((mrr - 0.75).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn cosine_matrix_is_bounded_and_symmetric(
            rows in proptest::collection::vec(proptest::collection::vec(-5.0..5.0f64, 4), 1..6)
        ) {
            prop_assume!(rows.iter().all(|r| norm(r) > 1e-6));
            let m = cosine_matrix(&rows, &rows).unwrap();
            let n = rows.len();
            for i in 0..n {
                prop_assert!((m.data()[i * n + i] - 1.0).abs() < 1e-12);
                for j in 0..n {
                    let v = m.data()[i * n + j];
                    prop_assert!((-1.0..=1.0).contains(&v));
                    prop_assert_eq!(v, m.data()[j * n + i]);
                }
            }
        }

        #[test]
        fn kmeans_objective_never_decreases(seed in 0u64..500, k in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f64>> = (0..12).map(|_| random_direction(3, &mut rng)).collect();
            let km = kmeans_cosine(&pts, k, seed, 50).unwrap();
            for w in km.objective.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-12, "{:?}", km.objective);
            }
            let again = kmeans_cosine(&pts, k, seed, 50).unwrap();
            prop_assert_eq!(km, again);
        }
    }
}
