//! Cross-modal retrieval evaluation (Random-M and Full Database protocols,
//! Rank@K) and recognition metrics (accuracy, macro-F1), plus report
//! emission.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::FashionFae;
use crate::patches::PatchGrid;

pub const RANK_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Image queries against text candidates.
    I2T,
    /// Text queries against image candidates.
    T2I,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::I2T => "i2t",
            Direction::T2I => "t2i",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "i2t" => Ok(Direction::I2T),
            "t2i" => Ok(Direction::T2I),
            other => Err(Error::invalid(format!("unknown direction `{other}`"))),
        }
    }
}

/// Pooled contrastive-mode features for every corpus item.
#[derive(Debug, Clone)]
pub struct ItemFeatures {
    pub image: Vec<Vec<f64>>,
    pub text: Vec<Vec<f64>>,
}

impl ItemFeatures {
    pub fn len(&self) -> usize {
        self.image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image.is_empty()
    }

    fn query(&self, direction: Direction, i: usize) -> &[f64] {
        match direction {
            Direction::I2T => &self.image[i],
            Direction::T2I => &self.text[i],
        }
    }

    fn candidate(&self, direction: Direction, i: usize) -> &[f64] {
        match direction {
            Direction::I2T => &self.text[i],
            Direction::T2I => &self.image[i],
        }
    }
}

/// Deterministic per-item pooled features via the contrastive mode.
pub fn embed_corpus(
    model: &FashionFae,
    inputs: &[crate::corpus::TextInput],
    grids: &[PatchGrid],
) -> Result<ItemFeatures> {
    if inputs.len() != grids.len() {
        return Err(Error::invalid("inputs and grids must be aligned"));
    }
    let mut image = Vec::with_capacity(inputs.len());
    let mut text = Vec::with_capacity(inputs.len());
    let mut g = Graph::new();
    for (input, grid) in inputs.iter().zip(grids) {
        g.clear();
        let pair = model.forward_contrastive(&mut g, &input.tokens, grid)?;
        image.push(g.data(pair.pooled_v).to_vec());
        text.push(g.data(pair.pooled_w).to_vec());
    }
    Ok(ItemFeatures { image, text })
}

/// Query-by-candidate score matrix with provenance.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    scores: Vec<f64>,
    pub n_queries: usize,
    pub n_candidates: usize,
    pub query_ids: Vec<String>,
    pub candidate_ids: Vec<String>,
    pub direction: Direction,
}

impl SimilarityMatrix {
    pub fn new(
        scores: Vec<f64>,
        query_ids: Vec<String>,
        candidate_ids: Vec<String>,
        direction: Direction,
    ) -> Result<Self> {
        let n_queries = query_ids.len();
        let n_candidates = candidate_ids.len();
        if scores.len() != n_queries * n_candidates {
            return Err(Error::invalid("score matrix has the wrong size"));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("similarity matrix".into()));
        }
        for ids in [&query_ids, &candidate_ids] {
            let mut sorted = ids.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != ids.len() {
                return Err(Error::invalid("duplicate ids in similarity matrix"));
            }
        }
        Ok(SimilarityMatrix {
            scores,
            n_queries,
            n_candidates,
            query_ids,
            candidate_ids,
            direction,
        })
    }

    pub fn at(&self, q: usize, c: usize) -> f64 {
        self.scores[q * self.n_candidates + c]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full query-by-candidate dot-product matrix for one direction.
pub fn similarity_matrix(
    features: &ItemFeatures,
    ids: &[String],
    direction: Direction,
) -> Result<SimilarityMatrix> {
    let n = features.len();
    let mut scores = Vec::with_capacity(n * n);
    for q in 0..n {
        for c in 0..n {
            scores.push(dot(
                features.query(direction, q),
                features.candidate(direction, c),
            ));
        }
    }
    SimilarityMatrix::new(scores, ids.to_vec(), ids.to_vec(), direction)
}

/// Zero-based rank of the truth candidate: the number of candidates that
/// score strictly higher, plus equal scorers with a lower candidate index
/// (deterministic tie rule).
fn rank_of(scores: &[f64], truth: usize) -> usize {
    let t = scores[truth];
    let mut rank = 0;
    for (c, &s) in scores.iter().enumerate() {
        if s > t || (s == t && c < truth) {
            rank += 1;
        }
    }
    rank
}

/// Percentage of queries whose ground-truth candidate appears among the K
/// highest-scoring candidates.
pub fn rank_at_k(sim: &SimilarityMatrix, ground_truth: &[usize], k: usize) -> Result<f64> {
    if ground_truth.len() != sim.n_queries {
        return Err(Error::invalid("ground truth must name one candidate per query"));
    }
    if sim.n_queries == 0 {
        return Err(Error::invalid("rank_at_k on zero queries"));
    }
    let mut hits = 0usize;
    for (q, &t) in ground_truth.iter().enumerate() {
        if t >= sim.n_candidates {
            return Err(Error::invalid(format!(
                "ground-truth candidate {t} missing from the candidate set"
            )));
        }
        let row = &sim.scores[q * sim.n_candidates..(q + 1) * sim.n_candidates];
        if rank_of(row, t) < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / sim.n_queries as f64)
}

/// One protocol run: Rank@{1,5,10} and their mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRun {
    pub protocol: String,
    pub direction: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub mean: f64,
    /// Set when some category was too small for the requested M.
    pub clamped: bool,
}

impl EvalRun {
    fn from_recalls(
        protocol: &str,
        direction: Direction,
        m: Option<usize>,
        seed: Option<u64>,
        recalls: [f64; 3],
        clamped: bool,
    ) -> Self {
        EvalRun {
            protocol: protocol.to_string(),
            direction: direction.as_str().to_string(),
            m,
            seed,
            r_at_1: recalls[0],
            r_at_5: recalls[1],
            r_at_10: recalls[2],
            mean: (recalls[0] + recalls[1] + recalls[2]) / 3.0,
            clamped,
        }
    }

    pub fn recalls(&self) -> [f64; 3] {
        [self.r_at_1, self.r_at_5, self.r_at_10]
    }
}

/// Full Database protocol: every item competes against the whole set.
pub fn protocol_full(
    features: &ItemFeatures,
    ids: &[String],
    direction: Direction,
) -> Result<EvalRun> {
    let sim = similarity_matrix(features, ids, direction)?;
    let gt: Vec<usize> = (0..features.len()).collect();
    let mut recalls = [0.0; 3];
    for (slot, &k) in RANK_KS.iter().enumerate() {
        recalls[slot] = rank_at_k(&sim, &gt, k)?;
    }
    Ok(EvalRun::from_recalls("full", direction, None, None, recalls, false))
}

/// Random-M protocol: each query competes against its true match plus M-1
/// same-category distractors sampled without replacement. Categories
/// smaller than M clamp the pool per query.
pub fn protocol_random_m(
    features: &ItemFeatures,
    ids: &[String],
    categories: &[String],
    m: usize,
    direction: Direction,
    seed: u64,
) -> Result<EvalRun> {
    let n = features.len();
    if n == 0 {
        return Err(Error::invalid("empty feature set"));
    }
    if categories.len() != n || ids.len() != n {
        return Err(Error::invalid("ids/categories must align with the features"));
    }
    if m == 0 {
        return Err(Error::invalid("m must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clamped = false;
    let mut hits = [0usize; 3];
    for q in 0..n {
        let mut pool: Vec<usize> = (0..n)
            .filter(|&i| i != q && categories[i] == categories[q])
            .collect();
        let want = m - 1;
        if pool.len() < want {
            clamped = true;
        }
        let take = want.min(pool.len());
        // partial Fisher-Yates over the distractor pool
        for i in 0..take {
            let j = rand::Rng::gen_range(&mut rng, i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(take);
        let mut candidates = vec![q];
        candidates.extend(pool);
        // candidate order follows ascending item index so the tie rule is
        // by item id
        candidates.sort_unstable();
        let truth_pos = candidates.iter().position(|&c| c == q).expect("present");
        let scores: Vec<f64> = candidates
            .iter()
            .map(|&c| dot(features.query(direction, q), features.candidate(direction, c)))
            .collect();
        let rank = rank_of(&scores, truth_pos);
        for (slot, &k) in RANK_KS.iter().enumerate() {
            if rank < k {
                hits[slot] += 1;
            }
        }
    }
    let recalls = [
        100.0 * hits[0] as f64 / n as f64,
        100.0 * hits[1] as f64 / n as f64,
        100.0 * hits[2] as f64 / n as f64,
    ];
    Ok(EvalRun::from_recalls(
        "random_m",
        direction,
        Some(m),
        Some(seed),
        recalls,
        clamped,
    ))
}

/// Accuracy and macro-averaged F1 over a known class set; per-class 0/0 F1
/// counts as 0.
pub fn classification_metrics(
    predictions: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<(f64, f64)> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::invalid("predictions and labels must be nonempty and aligned"));
    }
    if predictions.iter().chain(labels).any(|&v| v >= n_classes) {
        return Err(Error::invalid("class label out of range"));
    }
    let total = predictions.len() as f64;
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count() as f64;
    let accuracy = correct / total;

    let mut f1_sum = 0.0;
    for class in 0..n_classes {
        let tp = predictions
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p == class && **l == class)
            .count() as f64;
        let fp = predictions
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p == class && **l != class)
            .count() as f64;
        let fn_ = predictions
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p != class && **l == class)
            .count() as f64;
        let denom = 2.0 * tp + fp + fn_;
        let f1 = if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
        f1_sum += f1;
    }
    Ok((accuracy, f1_sum / n_classes as f64))
}

/// Metrics CSV (one row per run) plus a plain-text summary.
pub fn report(eval_runs: &[EvalRun], loss_rows: &[crate::training::LossRow]) -> (String, String) {
    let mut csv = String::from("protocol,direction,r@1,r@5,r@10,mean\n");
    for run in eval_runs {
        let _ = writeln!(
            csv,
            "{},{},{:.4},{:.4},{:.4},{:.4}",
            run.protocol, run.direction, run.r_at_1, run.r_at_5, run.r_at_10, run.mean
        );
    }

    let mut summary = String::from("retrieval\n");
    for run in eval_runs {
        let m_part = run
            .m
            .map(|m| format!(" m={m}"))
            .unwrap_or_default();
        let _ = writeln!(
            summary,
            "  {}{} {}: R@1 {:.2}  R@5 {:.2}  R@10 {:.2}  mean {:.2}",
            run.protocol, m_part, run.direction, run.r_at_1, run.r_at_5, run.r_at_10, run.mean
        );
    }
    if !loss_rows.is_empty() {
        let _ = writeln!(summary, "training losses (last per task)");
        let mut last: std::collections::BTreeMap<&str, f64> = Default::default();
        for row in loss_rows {
            last.insert(row.task.as_str(), row.loss);
        }
        for (task, loss) in last {
            let _ = writeln!(summary, "  {task}: {loss:.4}");
        }
    }
    (csv, summary)
}

/// Writes `metrics.csv` and `summary.txt` under `dir`.
pub fn write_report(
    dir: &Path,
    eval_runs: &[EvalRun],
    loss_rows: &[crate::training::LossRow],
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (csv, summary) = report(eval_runs, loss_rows);
    let csv_path = dir.join("metrics.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let sum_path = dir.join("summary.txt");
    std::fs::write(&sum_path, summary).map_err(|e| Error::io(&sum_path, e))?;
    Ok(())
}

pub fn save_eval_run(path: &Path, run: &EvalRun) -> Result<()> {
    let json = serde_json::to_string_pretty(run).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_eval_run(path: &Path) -> Result<EvalRun> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&content).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}
