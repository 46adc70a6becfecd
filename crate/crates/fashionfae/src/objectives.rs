//! The five pre-training objectives, their masking procedures, and the
//! per-iteration task sampler.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Value};
use crate::corpus::{AttributeName, TextInput};
use crate::error::{Error, Result};
use crate::model::FashionFae;
use crate::patches::{quantize, Codebook, PatchGrid};

pub const PATCH_MASK_RATIO: f64 = 0.25;

/// The five pre-training tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Aetp,
    Apir,
    Itc,
    Mlm,
    Itm,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Aetp, Task::Apir, Task::Itc, Task::Mlm, Task::Itm];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Aetp => "aetp",
            Task::Apir => "apir",
            Task::Itc => "itc",
            Task::Mlm => "mlm",
            Task::Itm => "itm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|t| t.as_str() == s)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown task `{s}`")))
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|t| *t == self).expect("member")
    }
}

/// Sampling probabilities over the five tasks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSchedule {
    probs: [f64; 5],
}

impl TaskSchedule {
    pub fn new(probs: [f64; 5]) -> Result<Self> {
        if probs.iter().any(|&p| p.is_nan() || p < 0.0 || !p.is_finite()) {
            return Err(Error::invalid("task probabilities must be nonnegative"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "task probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(TaskSchedule { probs })
    }

    pub fn uniform() -> Self {
        TaskSchedule { probs: [0.2; 5] }
    }

    pub fn only(task: Task) -> Self {
        let mut probs = [0.0; 5];
        probs[task.index()] = 1.0;
        TaskSchedule { probs }
    }

    pub fn uniform_over(tasks: &[Task]) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::invalid("schedule needs at least one task"));
        }
        let mut probs = [0.0; 5];
        for t in tasks {
            probs[t.index()] = 1.0 / tasks.len() as f64;
        }
        TaskSchedule::new(probs)
    }

    pub fn prob(&self, task: Task) -> f64 {
        self.probs[task.index()]
    }
}

/// Categorical draw over the schedule.
pub fn sample_task(schedule: &TaskSchedule, rng: &mut ChaCha8Rng) -> Task {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for t in Task::ALL {
        acc += schedule.prob(t);
        if u < acc {
            return t;
        }
    }
    Task::Itm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Attribute-mask: title subattributes plus one full attribute value.
    Attribute,
    /// Subword-mask over the description.
    Subword,
}

/// A masked token sequence with its recovery targets.
#[derive(Debug, Clone)]
pub struct MaskedText {
    pub tokens: Vec<usize>,
    /// Masked positions, ascending.
    pub positions: Vec<usize>,
    /// Original token ids at the masked positions.
    pub targets: Vec<usize>,
    pub kind: MaskKind,
    /// Set when the title had fewer words than requested.
    pub shortfall: bool,
}

fn sample_distinct(rng: &mut ChaCha8Rng, pool: &[usize], n: usize) -> Vec<usize> {
    let mut indices: Vec<usize> = pool.to_vec();
    // partial Fisher-Yates: first n entries become the sample
    for i in 0..n.min(indices.len()) {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    indices.truncate(n.min(pool.len()));
    indices
}

const NON_TITLE: [AttributeName; 5] = [
    AttributeName::Category,
    AttributeName::Subcategory,
    AttributeName::Gender,
    AttributeName::Composition,
    AttributeName::Season,
];

/// Masks `n` distinct title words plus the full value span of one uniformly
/// chosen other attribute. A title shorter than `n` is masked entirely and
/// flagged as a shortfall.
pub fn mask_attributes(
    input: &TextInput,
    mask_id: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> MaskedText {
    let title_span = input.attribute_span(AttributeName::Title);
    let title_positions: Vec<usize> = title_span.indices().collect();
    let (mut positions, shortfall) = if title_positions.len() >= n {
        (sample_distinct(rng, &title_positions, n), false)
    } else {
        (title_positions, true)
    };
    let chosen = NON_TITLE[rng.gen_range(0..NON_TITLE.len())];
    positions.extend(input.attribute_span(chosen).indices());
    positions.sort_unstable();

    let mut tokens = input.tokens.clone();
    let targets: Vec<usize> = positions.iter().map(|&p| input.tokens[p]).collect();
    for &p in &positions {
        tokens[p] = mask_id;
    }
    MaskedText {
        tokens,
        positions,
        targets,
        kind: MaskKind::Attribute,
        shortfall,
    }
}

/// Masks each description token independently with probability `ratio`,
/// forcing at least one mask.
pub fn mask_subwords(
    input: &TextInput,
    mask_id: usize,
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> MaskedText {
    let desc: Vec<usize> = input.description_span.indices().collect();
    let mut positions: Vec<usize> = desc
        .iter()
        .copied()
        .filter(|_| rng.gen::<f64>() < ratio)
        .collect();
    if positions.is_empty() {
        positions.push(desc[rng.gen_range(0..desc.len())]);
    }
    let mut tokens = input.tokens.clone();
    let targets: Vec<usize> = positions.iter().map(|&p| input.tokens[p]).collect();
    for &p in &positions {
        tokens[p] = mask_id;
    }
    MaskedText {
        tokens,
        positions,
        targets,
        kind: MaskKind::Subword,
        shortfall: false,
    }
}

/// Positions and codebook targets for the image reconstruction objective.
#[derive(Debug, Clone)]
pub struct MaskedImageBatch {
    /// Masked patch indices, ascending; exactly round(25%) of the grid.
    pub positions: Vec<usize>,
    /// Codebook label of each masked patch, fetched from the original
    /// pixels.
    pub targets: Vec<usize>,
}

/// Chooses round(25%) of the patches uniformly and records their quantized
/// labels. The replacement of the chosen state rows by the fusion token
/// happens inside the reconstruction forward pass.
pub fn mask_patches(
    grid: &PatchGrid,
    codebook: &Codebook,
    rng: &mut ChaCha8Rng,
) -> Result<MaskedImageBatch> {
    let n = grid.patch_count();
    if n < 4 {
        return Err(Error::invalid(format!(
            "patch masking needs at least 4 patches, got {n}"
        )));
    }
    let count = (PATCH_MASK_RATIO * n as f64).round() as usize;
    let pool: Vec<usize> = (0..n).collect();
    let mut positions = sample_distinct(rng, &pool, count);
    positions.sort_unstable();
    let mut targets = Vec::with_capacity(count);
    for &p in &positions {
        targets.push(quantize(grid.patch(p), codebook)?);
    }
    Ok(MaskedImageBatch { positions, targets })
}

fn masked_text_loss(
    g: &mut Graph,
    model: &FashionFae,
    batch: &[(&MaskedText, &PatchGrid)],
    expected_kind: MaskKind,
    op: &'static str,
) -> Result<Value> {
    if batch.is_empty() {
        return Err(Error::invalid(format!("{op} got an empty batch")));
    }
    let mut logit_parts = Vec::new();
    let mut targets = Vec::new();
    for (masked, grid) in batch {
        if masked.kind != expected_kind {
            return Err(Error::invalid(format!("{op} got a batch of the wrong mask kind")));
        }
        if masked.positions.is_empty() {
            return Err(Error::invalid(format!("{op} item has no masked positions")));
        }
        let image_states = model.encode_image(g, grid)?;
        let fused = model.forward_fusion(g, &masked.tokens, image_states)?;
        let selected = g.select_rows(fused, &masked.positions)?;
        logit_parts.push(model.text_head.apply(g, selected)?);
        targets.extend_from_slice(&masked.targets);
    }
    let logits = g.concat_rows(&logit_parts)?;
    g.cross_entropy_rows(logits, &targets)
}

/// Attribute prediction loss: mean cross-entropy at the attribute-masked
/// positions through the fusion mode, conditioned on the image. Uses the
/// word head shared with [`loss_mlm`].
pub fn loss_aetp(
    g: &mut Graph,
    model: &FashionFae,
    batch: &[(&MaskedText, &PatchGrid)],
) -> Result<Value> {
    masked_text_loss(g, model, batch, MaskKind::Attribute, "loss_aetp")
}

/// Masked language modeling loss over description subwords; same head
/// object as [`loss_aetp`].
pub fn loss_mlm(
    g: &mut Graph,
    model: &FashionFae,
    batch: &[(&MaskedText, &PatchGrid)],
) -> Result<Value> {
    masked_text_loss(g, model, batch, MaskKind::Subword, "loss_mlm")
}

/// Patch label prediction loss: mean cross-entropy of the reconstruction
/// logits against the codebook targets.
pub fn loss_apir(
    g: &mut Graph,
    model: &FashionFae,
    batch: &[(&TextInput, &PatchGrid, &MaskedImageBatch)],
) -> Result<Value> {
    if batch.is_empty() {
        return Err(Error::invalid("loss_apir got an empty batch"));
    }
    let mut logit_parts = Vec::new();
    let mut targets = Vec::new();
    for (text, grid, plan) in batch {
        if plan.positions.is_empty() {
            return Err(Error::invalid("loss_apir item has no masked patches"));
        }
        let out = model.forward_reconstruction(g, &text.tokens, grid, &plan.positions)?;
        logit_parts.push(out.logits);
        targets.extend_from_slice(&plan.targets);
    }
    let logits = g.concat_rows(&logit_parts)?;
    g.cross_entropy_rows(logits, &targets)
}

/// Symmetric InfoNCE over a score matrix whose diagonal holds the matched
/// pairs: 0.5 * (rows-as-queries + columns-as-queries).
pub fn info_nce_symmetric(g: &mut Graph, scores: Value) -> Result<Value> {
    let (b, b2) = g.shape(scores);
    if b != b2 {
        return Err(Error::ShapeMismatch {
            op: "info_nce_symmetric",
            left: (b, b),
            right: (b, b2),
        });
    }
    let diagonal: Vec<usize> = (0..b).collect();
    let i2t = g.cross_entropy_rows(scores, &diagonal)?;
    let st = g.transpose(scores);
    let t2i = g.cross_entropy_rows(st, &diagonal)?;
    let sum = g.add(i2t, t2i)?;
    Ok(g.scale(sum, 0.5))
}

/// Contrastive loss over aligned pooled features. The similarity is the
/// plain dot product of the average-pooled features; `temperature` divides
/// the scores and defaults to 1 in the run configuration.
pub fn loss_itc(
    g: &mut Graph,
    pooled_v: &[Value],
    pooled_w: &[Value],
    temperature: f64,
) -> Result<Value> {
    if pooled_v.is_empty() || pooled_v.len() != pooled_w.len() {
        return Err(Error::invalid(format!(
            "loss_itc needs aligned nonempty batches, got {} and {}",
            pooled_v.len(),
            pooled_w.len()
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    let v = g.concat_rows(pooled_v)?;
    let w = g.concat_rows(pooled_w)?;
    let wt = g.transpose(w);
    let mut scores = g.matmul(v, wt)?;
    if temperature != 1.0 {
        scores = g.scale(scores, 1.0 / temperature);
    }
    info_nce_symmetric(g, scores)
}

/// Match/mismatch assignment for one batch item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ItmAssignment {
    /// True pair, label 1.
    Keep,
    /// Text swapped in from another batch item, label 0.
    Swap(usize),
}

/// Draws the matched/unmatched assignment: keep with probability 1/2, else
/// swap in a uniformly chosen other item's text.
pub fn itm_assignments(batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<ItmAssignment>> {
    if batch_size < 2 {
        return Err(Error::invalid(format!(
            "matching needs a batch of at least 2, got {batch_size}"
        )));
    }
    let mut out = Vec::with_capacity(batch_size);
    for i in 0..batch_size {
        if rng.gen_bool(0.5) {
            out.push(ItmAssignment::Keep);
        } else {
            let mut j = rng.gen_range(0..batch_size - 1);
            if j >= i {
                j += 1;
            }
            out.push(ItmAssignment::Swap(j));
        }
    }
    Ok(out)
}

/// Binary match loss on the fused CLS state under explicit assignments.
pub fn loss_itm_with_assignments(
    g: &mut Graph,
    model: &FashionFae,
    batch: &[(&TextInput, &PatchGrid)],
    assignments: &[ItmAssignment],
) -> Result<Value> {
    if batch.len() != assignments.len() {
        return Err(Error::invalid("assignment count must match the batch"));
    }
    if batch.is_empty() {
        return Err(Error::invalid("loss_itm got an empty batch"));
    }
    let mut logit_parts = Vec::new();
    let mut labels = Vec::new();
    for (i, (_, grid)) in batch.iter().enumerate() {
        let (text, label) = match assignments[i] {
            ItmAssignment::Keep => (batch[i].0, 1usize),
            ItmAssignment::Swap(j) => (batch[j].0, 0usize),
        };
        let image_states = model.encode_image(g, grid)?;
        let fused = model.forward_fusion(g, &text.tokens, image_states)?;
        let cls = g.select_rows(fused, &[0])?;
        logit_parts.push(model.match_head.apply(g, cls)?);
        labels.push(label);
    }
    let logits = g.concat_rows(&logit_parts)?;
    g.cross_entropy_rows(logits, &labels)
}

/// Image-text matching loss with random in-batch negative construction.
pub fn loss_itm(
    g: &mut Graph,
    model: &FashionFae,
    batch: &[(&TextInput, &PatchGrid)],
    rng: &mut ChaCha8Rng,
) -> Result<Value> {
    let assignments = itm_assignments(batch.len(), rng)?;
    loss_itm_with_assignments(g, model, batch, &assignments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::corpus::{
        build_text_input, build_vocabulary, generate_corpus, GeneratorConfig, Span, Vocabulary,
    };
    use crate::model::ModelConfig;
    use crate::patches::{collect_patches, extract_patches, train_codebook};
    use rand::SeedableRng;

    struct Fixture {
        model: FashionFae,
        vocab: Vocabulary,
        inputs: Vec<TextInput>,
        grids: Vec<PatchGrid>,
        codebook: Codebook,
    }

    fn fixture() -> Fixture {
        let corpus = generate_corpus(&GeneratorConfig::with_total(6, 16, 4), 3).unwrap();
        let vocab = build_vocabulary(&corpus).unwrap();
        let grids: Vec<PatchGrid> = corpus
            .iter()
            .map(|it| extract_patches(&it.image, 4).unwrap())
            .collect();
        let refs = collect_patches(&grids);
        let codebook = train_codebook(&refs, 8, 10, 1).unwrap();
        let model = FashionFae::new(ModelConfig::tiny(vocab.len(), codebook.k()), 5).unwrap();
        let inputs: Vec<TextInput> = corpus
            .iter()
            .map(|it| build_text_input(it, &vocab).unwrap())
            .collect();
        Fixture {
            model,
            vocab,
            inputs,
            grids,
            codebook,
        }
    }

    #[test]
    fn attribute_masking_contract() {
        let f = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let input = &f.inputs[0];
        let masked = mask_attributes(input, f.vocab.mask_id(), 2, &mut rng);
        assert_eq!(masked.kind, MaskKind::Attribute);
        assert!(!masked.shortfall);
        // exactly 2 title positions plus one full other-attribute span
        let title = input.attribute_span(AttributeName::Title);
        let in_title = masked.positions.iter().filter(|p| title.contains(**p)).count();
        assert_eq!(in_title, 2);
        let rest: Vec<usize> = masked
            .positions
            .iter()
            .copied()
            .filter(|p| !title.contains(*p))
            .collect();
        let chosen_span = NON_TITLE
            .iter()
            .map(|&a| input.attribute_span(a))
            .find(|s| !rest.is_empty() && s.start == rest[0]);
        let span = chosen_span.expect("rest must be one attribute span");
        assert_eq!(rest, span.indices().collect::<Vec<_>>());
        // masked tokens replaced, targets recorded
        for (&p, &t) in masked.positions.iter().zip(&masked.targets) {
            assert_eq!(masked.tokens[p], f.vocab.mask_id());
            assert_eq!(t, input.tokens[p]);
        }
    }

    #[test]
    fn attribute_masking_degenerate_n_zero() {
        let f = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let masked = mask_attributes(&f.inputs[0], f.vocab.mask_id(), 0, &mut rng);
        // only one attribute value span masked
        let span_len = masked.positions.len();
        assert!(span_len >= 1);
        let title = f.inputs[0].attribute_span(AttributeName::Title);
        assert!(masked.positions.iter().all(|p| !title.contains(*p)));
    }

    #[test]
    fn attribute_masking_shortfall() {
        let f = fixture();
        let mut input = f.inputs[0].clone();
        // shrink the title span to one word
        let old = input.attribute_span(AttributeName::Title);
        input.attribute_spans[AttributeName::Title.index()] = Span {
            start: old.start,
            end: old.start + 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let masked = mask_attributes(&input, f.vocab.mask_id(), 3, &mut rng);
        assert!(masked.shortfall);
        assert!(masked.positions.contains(&old.start));
    }

    #[test]
    fn attribute_choice_frequency_is_uniform() {
        let f = fixture();
        let input = &f.inputs[0];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = [0usize; 5];
        let draws = 10_000;
        for _ in 0..draws {
            let masked = mask_attributes(input, f.vocab.mask_id(), 2, &mut rng);
            let title = input.attribute_span(AttributeName::Title);
            let rest: Vec<usize> = masked
                .positions
                .iter()
                .copied()
                .filter(|p| !title.contains(*p))
                .collect();
            for (k, &a) in NON_TITLE.iter().enumerate() {
                if input.attribute_span(a).start == rest[0] {
                    counts[k] += 1;
                }
            }
        }
        for &c in &counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.2).abs() <= 0.02, "frequency {freq}");
        }
    }

    #[test]
    fn subword_masking_saturation_and_floor() {
        let f = fixture();
        let input = &f.inputs[0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let all = mask_subwords(input, f.vocab.mask_id(), 1.0, &mut rng);
        assert_eq!(
            all.positions,
            input.description_span.indices().collect::<Vec<_>>()
        );
        let one = mask_subwords(input, f.vocab.mask_id(), 0.0, &mut rng);
        assert_eq!(one.positions.len(), 1);
        assert!(input.description_span.contains(one.positions[0]));
        assert_eq!(one.kind, MaskKind::Subword);
    }

    #[test]
    fn subword_masking_frequency() {
        // long synthetic description so the forced-mask correction vanishes
        let len = 100;
        let input = TextInput {
            tokens: (0..len + 1).map(|i| i % 7 + 5).collect(),
            description_span: Span { start: 1, end: len + 1 },
            attribute_spans: [Span { start: 0, end: 0 }; 6],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut masked_total = 0usize;
        let rounds = 100;
        for _ in 0..rounds {
            let m = mask_subwords(&input, 4, 0.15, &mut rng);
            masked_total += m.positions.len();
        }
        let fraction = masked_total as f64 / (rounds * len) as f64;
        assert!((fraction - 0.15).abs() <= 0.01, "fraction {fraction}");
    }

    #[test]
    fn patch_masking_counts() {
        let f = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // 16 patches -> exactly 4 masked
        let plan = mask_patches(&f.grids[0], &f.codebook, &mut rng).unwrap();
        assert_eq!(plan.positions.len(), 4);
        assert_eq!(plan.targets.len(), 4);
        for &t in &plan.targets {
            assert!(t < f.codebook.k());
        }

        // 4 patches -> exactly 1 masked
        let small = generate_corpus(&GeneratorConfig::with_total(1, 8, 4), 8).unwrap();
        let grid = extract_patches(&small[0].image, 4).unwrap();
        assert_eq!(grid.patch_count(), 4);
        let plan = mask_patches(&grid, &f.codebook, &mut rng).unwrap();
        assert_eq!(plan.positions.len(), 1);
    }

    #[test]
    fn patch_choice_frequency_is_uniform() {
        let f = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = f.grids[0].patch_count();
        let mut counts = vec![0usize; n];
        let draws = 10_000;
        for _ in 0..draws {
            let plan = mask_patches(&f.grids[0], &f.codebook, &mut rng).unwrap();
            for &p in &plan.positions {
                counts[p] += 1;
            }
        }
        let expected = 4.0 / 16.0;
        for &c in &counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - expected).abs() <= 0.02, "frequency {freq}");
        }
    }

    #[test]
    fn untrained_losses_sit_at_their_uniform_baselines() {
        let f = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mask_id = f.vocab.mask_id();

        let masked: Vec<MaskedText> = f
            .inputs
            .iter()
            .map(|inp| mask_attributes(inp, mask_id, 2, &mut rng))
            .collect();
        let batch: Vec<(&MaskedText, &PatchGrid)> =
            masked.iter().zip(f.grids.iter()).collect();
        let mut g = Graph::new();
        let loss = loss_aetp(&mut g, &f.model, &batch).unwrap();
        let val = g.scalar_value(loss);
        let baseline = (f.vocab.len() as f64).ln();
        assert!((val - baseline).abs() / baseline < 0.15, "aetp {val} vs {baseline}");

        let masked_sub: Vec<MaskedText> = f
            .inputs
            .iter()
            .map(|inp| mask_subwords(inp, mask_id, 0.15, &mut rng))
            .collect();
        let batch: Vec<(&MaskedText, &PatchGrid)> =
            masked_sub.iter().zip(f.grids.iter()).collect();
        let mut g = Graph::new();
        let loss = loss_mlm(&mut g, &f.model, &batch).unwrap();
        let val = g.scalar_value(loss);
        assert!((val - baseline).abs() / baseline < 0.15, "mlm {val} vs {baseline}");

        let plans: Vec<MaskedImageBatch> = f
            .grids
            .iter()
            .map(|gr| mask_patches(gr, &f.codebook, &mut rng).unwrap())
            .collect();
        let batch: Vec<(&TextInput, &PatchGrid, &MaskedImageBatch)> = f
            .inputs
            .iter()
            .zip(f.grids.iter())
            .zip(plans.iter())
            .map(|((t, gr), p)| (t, gr, p))
            .collect();
        let mut g = Graph::new();
        let loss = loss_apir(&mut g, &f.model, &batch).unwrap();
        let val = g.scalar_value(loss);
        let k_baseline = (f.codebook.k() as f64).ln();
        assert!((val - k_baseline).abs() / k_baseline < 0.15, "apir {val} vs {k_baseline}");

        let pairs: Vec<(&TextInput, &PatchGrid)> =
            f.inputs.iter().zip(f.grids.iter()).collect();
        let mut g = Graph::new();
        let loss = loss_itm(&mut g, &f.model, &pairs, &mut rng).unwrap();
        let val = g.scalar_value(loss);
        let two = 2.0f64.ln();
        assert!((val - two).abs() / two < 0.15, "itm {val} vs {two}");
    }

    #[test]
    fn aetp_batch_loss_is_mean_of_item_losses() {
        let f = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mask_id = f.vocab.mask_id();
        let masked: Vec<MaskedText> = f
            .inputs
            .iter()
            .take(3)
            .map(|inp| mask_attributes(inp, mask_id, 2, &mut rng))
            .collect();
        // the generator gives every item the same mask count (2 title words
        // plus a single-word value), so the position mean equals the mean of
        // per-item means
        let counts: Vec<usize> = masked.iter().map(|m| m.positions.len()).collect();
        assert!(counts.iter().all(|&c| c == counts[0]));

        let batch: Vec<(&MaskedText, &PatchGrid)> =
            masked.iter().zip(f.grids.iter()).collect();
        let mut g = Graph::new();
        let whole = loss_aetp(&mut g, &f.model, &batch).unwrap();
        let whole_val = g.scalar_value(whole);

        let mut acc = 0.0;
        for (m, gr) in &batch {
            let mut g = Graph::new();
            let l = loss_aetp(&mut g, &f.model, &[(*m, *gr)]).unwrap();
            acc += g.scalar_value(l);
        }
        let mean = acc / batch.len() as f64;
        assert!((whole_val - mean).abs() < 1e-12, "{whole_val} vs {mean}");
    }

    #[test]
    fn aetp_toy_head_matches_manual_softmax_arithmetic() {
        let f = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let masked = mask_attributes(&f.inputs[0], f.vocab.mask_id(), 0, &mut rng);
        assert_eq!(masked.positions.len(), 1);
        let pos = masked.positions[0];
        let target = masked.targets[0];

        let mut g = Graph::new();
        let loss = loss_aetp(&mut g, &f.model, &[(&masked, &f.grids[0])]).unwrap();
        let got = g.scalar_value(loss);

        // manual: fused state row -> head -> -log softmax[target]
        let mut g2 = Graph::new();
        let img = f.model.encode_image(&mut g2, &f.grids[0]).unwrap();
        let fused = f.model.forward_fusion(&mut g2, &masked.tokens, img).unwrap();
        let d = f.model.config().embed_dim;
        let state = g2.data(fused)[pos * d..(pos + 1) * d].to_vec();
        let w = f.model.text_head.w.value().clone();
        let b = f.model.text_head.b.value().clone();
        let v = f.vocab.len();
        let mut logits = vec![0.0; v];
        for j in 0..v {
            let mut s = b.data()[j];
            for i in 0..d {
                s += state[i] * w.at(i, j);
            }
            logits[j] = s;
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        let want = lse - logits[target];
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn mlm_certain_prediction_is_near_zero() {
        let f = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let masked = mask_subwords(&f.inputs[0], f.vocab.mask_id(), 0.0, &mut rng);
        let target = masked.targets[0];
        f.model.text_head.b.value_mut().data_mut()[target] = 1e4;
        let mut g = Graph::new();
        let loss = loss_mlm(&mut g, &f.model, &[(&masked, &f.grids[0])]).unwrap();
        assert!(g.scalar_value(loss) < 1e-6);
    }

    #[test]
    fn apir_single_label_codebook_gives_zero_loss() {
        let f = fixture();
        // k=1 codebook built from the same patches
        let refs = collect_patches(&f.grids);
        let cb1 = train_codebook(&refs, 1, 5, 0).unwrap();
        let model = FashionFae::new(ModelConfig::tiny(f.vocab.len(), 1), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let plan = mask_patches(&f.grids[0], &cb1, &mut rng).unwrap();
        let mut g = Graph::new();
        let loss = loss_apir(&mut g, &model, &[(&f.inputs[0], &f.grids[0], &plan)]).unwrap();
        assert_eq!(g.scalar_value(loss), 0.0);
    }

    #[test]
    fn itc_single_pair_is_exactly_zero() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::row(vec![0.3, -0.4, 0.9]));
        let w = g.leaf(Tensor::row(vec![1.2, 0.5, -0.6]));
        let loss = loss_itc(&mut g, &[v], &[w], 1.0).unwrap();
        assert_eq!(g.scalar_value(loss), 0.0);
    }

    #[test]
    fn itc_two_pairs_uniform_similarities_give_log_two() {
        let mut g = Graph::new();
        // identical features make every similarity equal
        let v1 = g.leaf(Tensor::row(vec![0.5, 0.5]));
        let v2 = g.leaf(Tensor::row(vec![0.5, 0.5]));
        let w1 = g.leaf(Tensor::row(vec![0.1, 0.9]));
        let w2 = g.leaf(Tensor::row(vec![0.1, 0.9]));
        let loss = loss_itc(&mut g, &[v1, v2], &[w1, w2], 1.0).unwrap();
        assert!((g.scalar_value(loss) - 2.0f64.ln()).abs() <= 1e-9);
    }

    #[test]
    fn itc_matches_brute_force_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let b = 4;
        let d = 6;
        let vs: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let ws: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut g = Graph::new();
        let v_vals: Vec<Value> = vs.iter().map(|v| g.leaf(Tensor::row(v.clone()))).collect();
        let w_vals: Vec<Value> = ws.iter().map(|w| g.leaf(Tensor::row(w.clone()))).collect();
        let loss = loss_itc(&mut g, &v_vals, &w_vals, 1.0).unwrap();
        let got = g.scalar_value(loss);

        // direct evaluation of the symmetric InfoNCE definition
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut i2t = 0.0;
        let mut t2i = 0.0;
        for i in 0..b {
            let pos = dot(&vs[i], &ws[i]).exp();
            let denom_w: f64 = (0..b).map(|j| dot(&vs[i], &ws[j]).exp()).sum();
            i2t += -(pos / denom_w).ln();
            let denom_v: f64 = (0..b).map(|j| dot(&vs[j], &ws[i]).exp()).sum();
            t2i += -(pos / denom_v).ln();
        }
        let want = 0.5 * (i2t / b as f64 + t2i / b as f64);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn info_nce_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let b = 5;
        let raw: Vec<f64> = (0..b * b).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut g = Graph::new();
        let scores = g.leaf(Tensor::new(b, b, raw.clone()).unwrap());
        let base = info_nce_symmetric(&mut g, scores).unwrap();
        let shifted_raw: Vec<f64> = raw.iter().map(|v| v + 3.75).collect();
        let shifted = g.leaf(Tensor::new(b, b, shifted_raw).unwrap());
        let with_shift = info_nce_symmetric(&mut g, shifted).unwrap();
        assert!((g.scalar_value(base) - g.scalar_value(with_shift)).abs() < 1e-12);
    }

    #[test]
    fn itm_biased_head_on_matched_batch_is_near_zero() {
        let f = fixture();
        f.model.match_head.b.value_mut().data_mut()[1] = 1e4;
        let pairs: Vec<(&TextInput, &PatchGrid)> =
            f.inputs.iter().take(2).zip(f.grids.iter()).collect();
        let assignments = vec![ItmAssignment::Keep, ItmAssignment::Keep];
        let mut g = Graph::new();
        let loss =
            loss_itm_with_assignments(&mut g, &f.model, &pairs, &assignments).unwrap();
        assert!(g.scalar_value(loss) < 1e-6);
    }

    #[test]
    fn itm_requires_batch_of_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        assert!(itm_assignments(1, &mut rng).is_err());
        assert!(itm_assignments(2, &mut rng).is_ok());
    }

    #[test]
    fn itm_label_balance() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut keeps = 0usize;
        let draws = 10_000;
        for _ in 0..draws {
            let a = itm_assignments(4, &mut rng).unwrap();
            keeps += a.iter().filter(|x| matches!(x, ItmAssignment::Keep)).count();
        }
        let freq = keeps as f64 / (draws * 4) as f64;
        assert!((freq - 0.5).abs() <= 0.02, "balance {freq}");
        // swaps always name another item
        for _ in 0..100 {
            let a = itm_assignments(3, &mut rng).unwrap();
            for (i, x) in a.iter().enumerate() {
                if let ItmAssignment::Swap(j) = x {
                    assert_ne!(*j, i);
                    assert!(*j < 3);
                }
            }
        }
    }

    #[test]
    fn task_sampler_contract() {
        // degenerate one-hot
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let only_itc = TaskSchedule::only(Task::Itc);
        for _ in 0..100 {
            assert_eq!(sample_task(&only_itc, &mut rng), Task::Itc);
        }

        // uniform frequencies over 50k draws
        let uniform = TaskSchedule::uniform();
        let mut counts = [0usize; 5];
        let draws = 50_000;
        for _ in 0..draws {
            counts[sample_task(&uniform, &mut rng).index()] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.2).abs() <= 0.01, "task frequency {freq}");
        }

        // seeded determinism
        let mut r1 = ChaCha8Rng::seed_from_u64(43);
        let mut r2 = ChaCha8Rng::seed_from_u64(43);
        let s1: Vec<Task> = (0..100).map(|_| sample_task(&uniform, &mut r1)).collect();
        let s2: Vec<Task> = (0..100).map(|_| sample_task(&uniform, &mut r2)).collect();
        assert_eq!(s1, s2);
    }

    #[test]
    fn schedule_validation() {
        assert!(TaskSchedule::new([0.2, 0.2, 0.2, 0.2, 0.2]).is_ok());
        assert!(TaskSchedule::new([0.3, 0.2, 0.2, 0.2, 0.2]).is_err());
        assert!(TaskSchedule::new([-0.2, 0.4, 0.2, 0.4, 0.2]).is_err());
        let sched = TaskSchedule::uniform_over(&[Task::Itc, Task::Itm, Task::Mlm]).unwrap();
        assert!(sched.prob(Task::Aetp) == 0.0);
        assert!((sched.prob(Task::Itc) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn word_head_is_shared_between_aetp_and_mlm() {
        let f = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let mask_id = f.vocab.mask_id();
        let attr = mask_attributes(&f.inputs[0], mask_id, 2, &mut rng);
        let sub = mask_subwords(&f.inputs[0], mask_id, 0.5, &mut rng);

        // both graphs touch the same head weight object
        let mut g1 = Graph::new();
        let _ = loss_aetp(&mut g1, &f.model, &[(&attr, &f.grids[0])]).unwrap();
        let mut g2 = Graph::new();
        let _ = loss_mlm(&mut g2, &f.model, &[(&sub, &f.grids[0])]).unwrap();
        let in_both = |p: &crate::autodiff::ParamRef| {
            g1.touched_params().iter().any(|q| std::rc::Rc::ptr_eq(q, p))
                && g2.touched_params().iter().any(|q| std::rc::Rc::ptr_eq(q, p))
        };
        assert!(in_both(&f.model.text_head.w));
        assert!(in_both(&f.model.text_head.b));

        // a gradient step through the subword loss changes the attribute
        // loss value
        let mut g = Graph::new();
        let before = {
            let l = loss_aetp(&mut g, &f.model, &[(&attr, &f.grids[0])]).unwrap();
            g.scalar_value(l)
        };
        let mut g3 = Graph::new();
        let mlm = loss_mlm(&mut g3, &f.model, &[(&sub, &f.grids[0])]).unwrap();
        g3.backward(mlm).unwrap();
        let grad = g3.param_grad(&f.model.text_head.w).unwrap();
        {
            let mut w = f.model.text_head.w.value_mut();
            for (wv, gv) in w.data_mut().iter_mut().zip(grad.data()) {
                *wv -= 0.5 * gv;
            }
        }
        let mut g4 = Graph::new();
        let after = {
            let l = loss_aetp(&mut g4, &f.model, &[(&attr, &f.grids[0])]).unwrap();
            g4.scalar_value(l)
        };
        assert_ne!(before, after);
    }

    #[test]
    fn losses_are_finite_and_nonnegative() {
        let f = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mask_id = f.vocab.mask_id();
        let attr = mask_attributes(&f.inputs[0], mask_id, 2, &mut rng);
        let sub = mask_subwords(&f.inputs[1], mask_id, 0.3, &mut rng);
        let plan = mask_patches(&f.grids[2], &f.codebook, &mut rng).unwrap();

        let mut g = Graph::new();
        let l1 = loss_aetp(&mut g, &f.model, &[(&attr, &f.grids[0])]).unwrap();
        let l2 = loss_mlm(&mut g, &f.model, &[(&sub, &f.grids[1])]).unwrap();
        let l3 = loss_apir(&mut g, &f.model, &[(&f.inputs[2], &f.grids[2], &plan)]).unwrap();
        let pairs: Vec<(&TextInput, &PatchGrid)> =
            f.inputs.iter().take(4).zip(f.grids.iter()).collect();
        let l4 = loss_itm(&mut g, &f.model, &pairs, &mut rng).unwrap();
        let mut pooled_v = Vec::new();
        let mut pooled_w = Vec::new();
        for (t, gr) in pairs.iter().take(3) {
            let pair = f.model.forward_contrastive(&mut g, &t.tokens, gr).unwrap();
            pooled_v.push(pair.pooled_v);
            pooled_w.push(pair.pooled_w);
        }
        let l5 = loss_itc(&mut g, &pooled_v, &pooled_w, 1.0).unwrap();
        for l in [l1, l2, l3, l4, l5] {
            let v = g.scalar_value(l);
            assert!(v.is_finite() && v >= 0.0, "loss {v}");
        }
    }

    #[test]
    fn wrong_mask_kind_is_rejected() {
        let f = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let sub = mask_subwords(&f.inputs[0], f.vocab.mask_id(), 0.3, &mut rng);
        let mut g = Graph::new();
        assert!(loss_aetp(&mut g, &f.model, &[(&sub, &f.grids[0])]).is_err());
    }
}
