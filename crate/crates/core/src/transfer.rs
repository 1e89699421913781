//! Fused features as image descriptors: extraction, linear probing, KNN
//! retrieval metrics and diagnostic dumps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::checkpoint::Checkpoint;
use crate::data::{BatchStream, Dataset};
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::layers::{linear, softmax_cross_entropy};
use crate::model::{GraphSpec, ModelParams};
use crate::network::infer;
use crate::tensor::Tensor;
use crate::train::{argmax, sgd_step, TrainConfig};

/// One feature vector per row, with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: Tensor<f32>,
    pub labels: Vec<usize>,
    pub l2_normalized: bool,
}

impl FeatureMatrix {
    pub fn new(rows: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        let (n, _) = rows.dims2("feature rows")?;
        if labels.len() != n {
            return Err(Error::shape(format!("{} labels for {n} feature rows", labels.len())));
        }
        Ok(FeatureMatrix {
            rows,
            labels,
            l2_normalized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let k = self.dim();
        &self.rows.data()[i * k..(i + 1) * k]
    }

    /// Scales every row to unit L2 norm; all-zero rows stay zero.
    pub fn l2_normalize(mut self) -> Self {
        let k = self.dim();
        for row in self.rows.data_mut().chunks_exact_mut(k) {
            let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
            }
        }
        self.l2_normalized = true;
        self
    }

    /// CSV with header `label,f0,…,f{K-1}`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label");
        for j in 0..self.dim() {
            let _ = write!(s, ",f{j}");
        }
        s.push('\n');
        for i in 0..self.len() {
            let _ = write!(s, "{}", self.labels[i]);
            for v in self.row(i) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Data("empty feature CSV".into()))?;
        let k = header.split(',').count().saturating_sub(1);
        if !header.starts_with("label") || k == 0 {
            return Err(Error::Data(format!("bad feature CSV header {header:?}")));
        }
        let mut labels = Vec::new();
        let mut data = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut fields = line.split(',');
            let bad = || Error::Data(format!("feature CSV row {}: malformed", i + 1));
            labels.push(fields.next().and_then(|f| f.trim().parse().ok()).ok_or_else(bad)?);
            let before = data.len();
            for f in fields {
                data.push(f.trim().parse::<f32>().map_err(|_| bad())?);
            }
            if data.len() - before != k {
                return Err(bad());
            }
        }
        if labels.is_empty() {
            return Err(Error::Data("feature CSV has no rows".into()));
        }
        FeatureMatrix::new(Tensor::from_vec(&[labels.len(), k], data)?, labels)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.push("features", self.rows.clone())?;
        ck.push(
            "labels",
            Tensor::<f64>::from_vec(&[self.len()], self.labels.iter().map(|&l| l as f64).collect())?,
        )?;
        ck.push("l2_normalized", Tensor::<f64>::scalar(self.l2_normalized as u8 as f64))?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let rows = ck.require("features")?.to_real::<f32>();
        let labels = ck
            .require("labels")?
            .to_real::<f64>()
            .data()
            .iter()
            .map(|&l| l as usize)
            .collect();
        let mut fm = FeatureMatrix::new(rows, labels)?;
        fm.l2_normalized = ck
            .get("l2_normalized")
            .is_some_and(|t| t.to_real::<f64>().data()[0] != 0.0);
        Ok(fm)
    }
}

/// Fuse-node outputs for every image, computed in chunks of `batch`.
pub fn extract_fused_features(
    graph: &GraphSpec,
    params: &ModelParams<f32>,
    data: &Dataset,
    batch: usize,
    normalize: bool,
) -> Result<FeatureMatrix> {
    let fuse = graph
        .fuse_node()
        .ok_or_else(|| Error::Graph("graph has no fusion node".into()))?
        .name
        .clone();
    let mut parts = Vec::new();
    for start in (0..data.len()).step_by(batch.max(1)) {
        let end = (start + batch.max(1)).min(data.len());
        let images = data.images.slice_batch(start, end)?;
        let mut outs = infer(graph, params, &images)?;
        parts.push(outs.remove(&fuse).expect("fuse node evaluated"));
    }
    let fm = FeatureMatrix::new(Tensor::concat_batch(&parts)?, data.labels.clone())?;
    Ok(if normalize { fm.l2_normalize() } else { fm })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 30,
            lr: 0.1,
            batch: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Test classes that never occur in the training set.
    pub missing_classes: Vec<usize>,
    pub predictions: Vec<usize>,
}

/// Softmax classifier on frozen features, trained with mini-batch SGD
/// (momentum 0.9, no weight decay) from zero weights.
pub fn linear_probe(train: &FeatureMatrix, test: &FeatureMatrix, cfg: &ProbeConfig) -> Result<ProbeResult> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data("linear probe needs nonempty train and test features".into()));
    }
    if train.dim() != test.dim() {
        return Err(Error::shape(format!(
            "train features have dimension {}, test {}",
            train.dim(),
            test.dim()
        )));
    }
    let k = train.dim();
    let classes = train.labels.iter().chain(&test.labels).max().copied().unwrap_or(0) + 1;
    let seen: BTreeSet<usize> = train.labels.iter().copied().collect();
    let missing_classes: Vec<usize> = test
        .labels
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .difference(&seen)
        .copied()
        .collect();

    let mut params = ModelParams::<f32>::new();
    params.insert("probe.weight", Tensor::zeros(&[classes, k])?);
    params.insert("probe.bias", Tensor::zeros(&[classes])?);
    let mut velocity = ModelParams::new();
    let sgd = TrainConfig {
        lr: cfg.lr,
        momentum: 0.9,
        wd: 0.0,
        batch: cfg.batch,
        iters: usize::MAX,
        drops: Vec::new(),
        decay: 1.0,
        seed: cfg.seed,
        augment: false,
        log_every: 0,
    };
    sgd.validate()?;
    let stream = BatchStream::new(train.len(), cfg.batch, cfg.seed)?;
    for epoch in 0..cfg.epochs {
        for idx in stream.batches(epoch) {
            let x = train.rows.gather_batch(&idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let (z, lin) = linear(&x, params.require("probe.weight")?, params.require("probe.bias")?)?;
            let (_, ce) = softmax_cross_entropy(&z, &y)?;
            let g = lin.backward(&ce.backward(1.0f32)?)?;
            let grads = BTreeMap::from([
                ("probe.weight".to_string(), g.weight),
                ("probe.bias".to_string(), g.bias),
            ]);
            sgd_step(&mut params, &grads, &mut velocity, &sgd, cfg.lr)?;
        }
    }
    let (z, _) = linear(&test.rows, params.require("probe.weight")?, params.require("probe.bias")?)?;
    let predictions: Vec<usize> = z.data().chunks_exact(classes).map(argmax).collect();
    let correct = predictions.iter().zip(&test.labels).filter(|(p, l)| p == l).count();
    Ok(ProbeResult {
        accuracy: correct as f64 / test.len() as f64,
        missing_classes,
        predictions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Distance {
    Euclidean,
    #[default]
    Cosine,
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Distance::Euclidean),
            "cosine" => Ok(Distance::Cosine),
            other => Err(Error::InvalidValue {
                key: "distance".into(),
                msg: format!("expected euclidean or cosine, got {other:?}"),
            }),
        }
    }
}

impl Distance {
    /// Euclidean distance, or `1 − cos` (taken as 1 when either vector is zero).
    pub fn between(self, a: &[f32], b: &[f32]) -> f64 {
        match self {
            Distance::Euclidean => a
                .iter()
                .zip(b)
                .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                .sum::<f64>()
                .sqrt(),
            Distance::Cosine => {
                let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
                for (&x, &y) in a.iter().zip(b) {
                    dot += x as f64 * y as f64;
                    na += (x as f64).powi(2);
                    nb += (y as f64).powi(2);
                }
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na.sqrt() * nb.sqrt())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// Database indices per query, nearest first.
    pub rankings: Vec<Vec<usize>>,
}

/// Ranks the whole database for every query by ascending distance, breaking
/// ties by the lower database index.
pub fn knn_retrieve(db: &FeatureMatrix, queries: &FeatureMatrix, distance: Distance) -> Result<RetrievalResult> {
    if db.is_empty() {
        return Err(Error::Retrieval("empty database".into()));
    }
    if db.dim() != queries.dim() {
        return Err(Error::Retrieval(format!(
            "database dimension {} differs from query dimension {}",
            db.dim(),
            queries.dim()
        )));
    }
    let rankings = (0..queries.len())
        .map(|q| {
            let mut scored: Vec<(f64, usize)> = (0..db.len())
                .map(|i| (distance.between(queries.row(q), db.row(i)), i))
                .collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            scored.into_iter().map(|(_, i)| i).collect()
        })
        .collect();
    Ok(RetrievalResult { rankings })
}

/// Mean number of same-group items among each query's top 4. Every group id
/// in `db_groups` must occur exactly four times.
pub fn ns_score(result: &RetrievalResult, db_groups: &[usize], query_groups: &[usize]) -> Result<f64> {
    if result.rankings.len() != query_groups.len() || result.rankings.is_empty() {
        return Err(Error::Retrieval(format!(
            "{} rankings for {} queries",
            result.rankings.len(),
            query_groups.len()
        )));
    }
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &g in db_groups {
        *sizes.entry(g).or_default() += 1;
    }
    if let Some((g, n)) = sizes.iter().find(|(_, &n)| n != 4) {
        return Err(Error::Retrieval(format!("group {g} has {n} members, expected 4")));
    }
    let mut total = 0usize;
    for (ranking, &qg) in result.rankings.iter().zip(query_groups) {
        if !sizes.contains_key(&qg) {
            return Err(Error::Retrieval(format!("query group {qg} absent from database")));
        }
        total += ranking.iter().take(4).filter(|&&i| db_groups[i] == qg).count();
    }
    Ok(total as f64 / result.rankings.len() as f64)
}

/// Average precision of one ranked list: the mean, over relevant items, of
/// the precision at each relevant item's rank.
pub fn average_precision(ranking: &[usize], relevant: &BTreeSet<usize>) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::Retrieval("empty relevance set".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, i) in ranking.iter().enumerate() {
        if relevant.contains(i) {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / relevant.len() as f64)
}

pub fn mean_ap(result: &RetrievalResult, relevance: &[BTreeSet<usize>]) -> Result<f64> {
    if result.rankings.len() != relevance.len() || relevance.is_empty() {
        return Err(Error::Retrieval(format!(
            "{} rankings for {} relevance sets",
            result.rankings.len(),
            relevance.len()
        )));
    }
    let mut sum = 0.0;
    for (q, (ranking, rel)) in result.rankings.iter().zip(relevance).enumerate() {
        sum += average_precision(ranking, rel)
            .map_err(|_| Error::Retrieval(format!("query {q} has an empty relevance set")))?;
    }
    Ok(sum / relevance.len() as f64)
}

/// Channels of `activations [K, H, W]` by descending spatial mean; equal
/// means keep ascending channel order.
pub fn rank_feature_maps(activations: &Tensor<f32>) -> Result<Vec<usize>> {
    let (k, h, w) = match *activations.shape() {
        [k, h, w] => (k, h, w),
        [1, k, h, w] => (k, h, w),
        _ => return Err(Error::shape(format!("expected [K, H, W], got {:?}", activations.shape()))),
    };
    let means: Vec<f64> = activations
        .data()
        .chunks_exact(h * w)
        .map(|m| m.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64)
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
    Ok(order)
}

/// Binary PGM (P5) of one map, min-max scaled to 0..=255; constant maps are 128.
pub fn map_to_pgm(map: &[f32], h: usize, w: usize) -> Vec<u8> {
    let lo = map.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.iter().map(|&v| {
        if hi > lo {
            ((v - lo) as f64 / (hi - lo) as f64 * 255.0).round() as u8
        } else {
            128
        }
    }));
    out
}

/// Writes the `top_m` highest-ranked maps as `map_<rank>_<channel>.pgm`
/// (rank starting at 1) and returns the full order with the written paths.
pub fn write_top_maps(activations: &Tensor<f32>, top_m: usize, dir: &Path) -> Result<(Vec<usize>, Vec<PathBuf>)> {
    let order = rank_feature_maps(activations)?;
    if top_m > order.len() {
        return Err(Error::shape(format!("top_m {top_m} exceeds {} channels", order.len())));
    }
    let s = activations.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (rank, &ch) in order.iter().take(top_m).enumerate() {
        let path = dir.join(format!("map_{}_{}.pgm", rank + 1, ch));
        fs::write(&path, map_to_pgm(&activations.data()[ch * h * w..(ch + 1) * h * w], h, w))?;
        paths.push(path);
    }
    Ok((order, paths))
}

/// LC fusion weights `[K, S]` and their per-branch means.
#[derive(Debug, Clone, PartialEq)]
pub struct LcWeights {
    pub matrix: Tensor<f32>,
    pub means: Vec<f64>,
}

impl LcWeights {
    pub fn means_csv(&self) -> String {
        let mut s = String::from("branch,mean_weight\n");
        for (b, m) in self.means.iter().enumerate() {
            let _ = writeln!(s, "{},{m}", b + 1);
        }
        s
    }

    pub fn matrix_csv(&self) -> String {
        let (k, branches) = (self.matrix.shape()[0], self.matrix.shape()[1]);
        let mut s = String::from("channel");
        for b in 0..branches {
            let _ = write!(s, ",branch{}", b + 1);
        }
        s.push('\n');
        for i in 0..k {
            let _ = write!(s, "{i}");
            for v in &self.matrix.data()[i * branches..(i + 1) * branches] {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

pub fn dump_lc_weights(graph: &GraphSpec, params: &ModelParams<f32>) -> Result<LcWeights> {
    if graph.fusion != Some(FusionKind::Lc) {
        return Err(Error::Fusion(format!(
            "lc weights requested but the graph uses {}",
            graph.fusion.map_or("no fusion".to_string(), |k| format!("{k} fusion"))
        )));
    }
    let fuse = graph.fuse_node().expect("lc graph has a fuse node");
    let matrix = params.require(&format!("{}.weight", fuse.name))?.clone();
    let (k, s) = matrix.dims2("lc weights")?;
    let means = (0..s)
        .map(|b| (0..k).map(|i| matrix.data()[i * s + b] as f64).sum::<f64>() / k as f64)
        .collect();
    Ok(LcWeights { matrix, means })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fm(rows: &[&[f64]], labels: &[usize]) -> FeatureMatrix {
        let k = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        FeatureMatrix::new(Tensor::from_f64s(&[rows.len(), k], &flat).unwrap(), labels.to_vec()).unwrap()
    }

    fn random_fm(n: usize, k: usize, labels: Vec<usize>, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * k).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        FeatureMatrix::new(Tensor::from_vec(&[n, k], data).unwrap(), labels).unwrap()
    }

    #[test]
    fn knn_line_and_ties() {
        let db = fm(&[&[0.9], &[0.1], &[0.5]], &[0, 0, 0]);
        let q = fm(&[&[0.0]], &[0]);
        let r = knn_retrieve(&db, &q, Distance::Euclidean).unwrap();
        assert_eq!(r.rankings[0], vec![1, 2, 0]);

        let dup = fm(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]], &[0, 0, 0]);
        let r = knn_retrieve(&dup, &dup, Distance::Cosine).unwrap();
        assert_eq!(r.rankings[0][0], 0);
        assert_eq!(r.rankings[1][..2], [0, 1]);
        assert!(knn_retrieve(&fm(&[&[1.0]], &[0]), &fm(&[&[1.0, 2.0]], &[0]), Distance::Cosine).is_err());
    }

    #[test]
    fn cosine_scale_invariant() {
        let db = random_fm(30, 5, vec![0; 30], 1);
        let q = random_fm(3, 5, vec![0; 3], 2);
        let mut scaled = q.clone();
        scaled.rows = q.rows.scale(7.5);
        assert_eq!(
            knn_retrieve(&db, &q, Distance::Cosine).unwrap(),
            knn_retrieve(&db, &scaled, Distance::Cosine).unwrap()
        );
    }

    #[test]
    fn ns_cases() {
        let groups: Vec<usize> = (0..40).map(|i| i / 4).collect();
        let mut rows = Vec::new();
        for g in 0..10 {
            for _ in 0..4 {
                rows.push(vec![g as f64 * 10.0, 1.0]);
            }
        }
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let db = fm(&refs, &groups);
        let r = knn_retrieve(&db, &db, Distance::Euclidean).unwrap();
        assert_eq!(ns_score(&r, &groups, &groups).unwrap(), 4.0);

        let adversarial = RetrievalResult {
            rankings: (0..40).map(|q| (0..40).rev().filter(|&i| groups[i] != groups[q]).chain((0..40).filter(|&i| groups[i] == groups[q])).collect()).collect(),
        };
        assert_eq!(ns_score(&adversarial, &groups, &groups).unwrap(), 0.0);
        assert!(ns_score(&r, &groups[..39], &groups).is_err());
    }

    #[test]
    fn ns_random_matches_expectation() {
        let n = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut groups: Vec<usize> = (0..n).map(|i| i / 4).collect();
        for i in (1..n).rev() {
            groups.swap(i, rng.gen_range(0..=i));
        }
        let db = random_fm(n, 8, vec![0; n], 3);
        let queries = 4000;
        let q = random_fm(queries, 8, vec![0; queries], 4);
        let qg: Vec<usize> = (0..queries).map(|_| rng.gen_range(0..n / 4)).collect();
        let r = knn_retrieve(&db, &q, Distance::Euclidean).unwrap();
        let score = ns_score(&r, &groups, &qg).unwrap();
        let expected = 4.0 * 4.0 / n as f64;
        let se = (expected / queries as f64).sqrt();
        assert!((score - expected).abs() < 4.0 * se, "{score} vs {expected}");
    }

    #[test]
    fn ap_cases() {
        let one = |i: usize| BTreeSet::from([i]);
        assert_eq!(average_precision(&[3, 1, 2], &one(3)).unwrap(), 1.0);
        assert_eq!(average_precision(&[1, 3, 2], &one(3)).unwrap(), 0.5);
        assert_eq!(average_precision(&[4, 7, 1], &BTreeSet::from([4, 7])).unwrap(), 1.0);
        assert!(average_precision(&[1], &BTreeSet::new()).is_err());
        let r = RetrievalResult { rankings: vec![vec![0, 1], vec![0, 1]] };
        assert_eq!(mean_ap(&r, &[one(0), one(1)]).unwrap(), 0.75);
    }

    #[test]
    fn metrics_invariant_to_storage_order() {
        let groups: Vec<usize> = (0..24).map(|i| i / 4).collect();
        let db = random_fm(24, 4, groups.clone(), 5);
        let q = random_fm(6, 4, (0..6).collect(), 6);
        let perm: Vec<usize> = (0..24).rev().collect();
        let permuted = FeatureMatrix::new(db.rows.gather_batch(&perm).unwrap(), perm.iter().map(|&i| groups[i]).collect()).unwrap();
        let pg: Vec<usize> = perm.iter().map(|&i| groups[i]).collect();
        let a = ns_score(&knn_retrieve(&db, &q, Distance::Cosine).unwrap(), &groups, &q.labels).unwrap();
        let b = ns_score(&knn_retrieve(&permuted, &q, Distance::Cosine).unwrap(), &pg, &q.labels).unwrap();
        assert_eq!(a, b);
    }

    fn gaussian_two_class(n: usize, sep: f32, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let l = i % 2;
            let centre = if l == 0 { -sep } else { sep };
            // Sum of uniforms: approximately Gaussian with unit variance.
            let noise = |rng: &mut ChaCha8Rng| (0..12).map(|_| rng.gen_range(0.0f32..1.0)).sum::<f32>() - 6.0;
            data.push(centre + noise(&mut rng) * 0.3);
            data.push(noise(&mut rng));
            labels.push(l);
        }
        FeatureMatrix::new(Tensor::from_vec(&[n, 2], data).unwrap(), labels).unwrap()
    }

    #[test]
    fn probe_separable() {
        let train = gaussian_two_class(200, 3.0, 1);
        let test = gaussian_two_class(200, 3.0, 2);
        for set in [&train, &test] {
            let (lo1, hi0) = (0..set.len()).fold((f32::MAX, f32::MIN), |(lo1, hi0), i| {
                let x = set.row(i)[0];
                if set.labels[i] == 1 { (lo1.min(x), hi0) } else { (lo1, hi0.max(x)) }
            });
            assert!(lo1 > hi0, "margin check failed");
        }
        let r = linear_probe(&train, &test, &ProbeConfig::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.missing_classes.is_empty());
    }

    #[test]
    fn probe_chance_and_optimism() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 2000;
        let train = random_fm(n, 4, (0..n).map(|_| rng.gen_range(0..2)).collect(), 11);
        let test = random_fm(n, 4, (0..n).map(|_| rng.gen_range(0..2)).collect(), 12);
        let cfg = ProbeConfig { epochs: 5, ..Default::default() };
        let held_out = linear_probe(&train, &test, &cfg).unwrap().accuracy;
        assert!((held_out - 0.5).abs() <= 0.05, "{held_out}");

        let small = random_fm(60, 80, (0..60).map(|_| rng.gen_range(0..2)).collect(), 13);
        let other = random_fm(60, 80, (0..60).map(|_| rng.gen_range(0..2)).collect(), 14);
        let cfg = ProbeConfig { epochs: 100, ..Default::default() };
        let resub = linear_probe(&small, &small, &cfg).unwrap().accuracy;
        let held_out = linear_probe(&small, &other, &cfg).unwrap().accuracy;
        assert!(resub >= held_out, "{resub} < {held_out}");
        assert_eq!(resub, 1.0);
    }

    #[test]
    fn probe_reports_missing_class() {
        let train = fm(&[&[0.0], &[1.0]], &[0, 1]);
        let test = fm(&[&[0.0], &[5.0]], &[0, 2]);
        let r = linear_probe(&train, &test, &ProbeConfig::default()).unwrap();
        assert_eq!(r.missing_classes, vec![2]);
    }

    #[test]
    fn feature_csv_and_checkpoint_round_trip() {
        let f = random_fm(5, 3, vec![0, 1, 2, 1, 0], 8).l2_normalize();
        for i in 0..f.len() {
            let n: f64 = f.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let csv = f.to_csv();
        assert!(csv.starts_with("label,f0,f1,f2\n"));
        let back = FeatureMatrix::from_csv(&csv).unwrap();
        assert_eq!(back.rows, f.rows);
        let ck = FeatureMatrix::from_checkpoint(&f.to_checkpoint().unwrap()).unwrap();
        assert_eq!(ck, f);
    }

    #[test]
    fn feature_map_ranking() {
        let t = Tensor::<f32>::from_f64s(&[3, 1, 1], &[5.0, 1.0, 3.0]).unwrap();
        assert_eq!(rank_feature_maps(&t).unwrap(), vec![0, 2, 1]);
        let flat = Tensor::<f32>::from_f64s(&[3, 1, 1], &[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(rank_feature_maps(&flat).unwrap(), vec![0, 1, 2]);
        let pgm = map_to_pgm(&[0.3; 4], 2, 2);
        assert_eq!(&pgm[pgm.len() - 4..], &[128; 4]);
        let ramp = map_to_pgm(&[0.0, 1.0, 2.0], 1, 3);
        assert_eq!(&ramp[ramp.len() - 3..], &[0, 128, 255]);

        let dir = tempfile::tempdir().unwrap();
        let (order, paths) = write_top_maps(&t, 2, dir.path()).unwrap();
        assert_eq!(order, vec![0, 2, 1]);
        assert!(paths[0].ends_with("map_1_0.pgm") && paths[1].ends_with("map_2_2.pgm"));
        assert!(fs::read(&paths[0]).unwrap().starts_with(b"P5\n1 1\n255\n"));
        assert!(write_top_maps(&t, 4, dir.path()).is_err());
    }

    fn toy_graph(branches: &[&str], fusion: FusionKind) -> GraphSpec {
        crate::model::build_generic_cfn(&crate::model::ModelConfig {
            widths: vec![4, 4, 4, 4, 4, 4, 6],
            branch_points: branches.iter().map(|s| s.to_string()).collect(),
            fusion,
            k: None,
            classes: 3,
            in_channels: 3,
        })
        .unwrap()
    }

    #[test]
    fn lc_weight_means_at_init() {
        let g = toy_graph(&["pool2", "pool3"], FusionKind::Lc);
        let w = dump_lc_weights(&g, &ModelParams::init(&g, 1).unwrap()).unwrap();
        assert_eq!(w.matrix.shape(), &[6, 3]);
        for m in &w.means {
            assert!((m - 1.0 / 3.0).abs() < 1e-7);
        }
        assert!(w.means_csv().starts_with("branch,mean_weight\n1,"));
        assert!(w.matrix_csv().starts_with("channel,branch1,branch2,branch3\n0,"));

        let g4 = toy_graph(&["pool1", "pool2", "pool3"], FusionKind::Lc);
        let w4 = dump_lc_weights(&g4, &ModelParams::init(&g4, 1).unwrap()).unwrap();
        assert_eq!(w4.means, vec![0.25; 4]);

        let sum = toy_graph(&["pool2"], FusionKind::Sum);
        assert!(dump_lc_weights(&sum, &ModelParams::init(&sum, 1).unwrap()).is_err());
    }

    #[test]
    fn extracted_features() {
        let g = toy_graph(&["pool2", "pool3"], FusionKind::Lc);
        let p = ModelParams::init(&g, 2).unwrap();
        let mut data = crate::data::make_synthetic(3, 9, 8, 1).unwrap();
        let (img, lab) = data.batch(&[0, 1, 2, 0, 4, 5, 6, 7, 8]).unwrap();
        data.images = img;
        data.labels = lab;
        let f = extract_fused_features(&g, &p, &data, 4, false).unwrap();
        assert_eq!(f.dim(), 6);
        assert_eq!(f.row(0), f.row(3));
        let one = extract_fused_features(&g, &p, &data, 1, false).unwrap();
        let all = extract_fused_features(&g, &p, &data, 32, false).unwrap();
        assert!(one.rows.max_abs_diff(&all.rows) <= 1e-6);
        let n = extract_fused_features(&g, &p, &data, 4, true).unwrap();
        assert!(n.l2_normalized);

        let plain = toy_graph(&[], FusionKind::Lc);
        let pp = ModelParams::init(&plain, 2).unwrap();
        assert!(extract_fused_features(&plain, &pp, &data, 4, false).is_err());
    }
}
