//! Walk one item through the model's three operating modes and check the
//! fusion-token identity with a zeroed MLP.

use fashionfae::autodiff::{Graph, Tensor};
use fashionfae::corpus::{build_text_input, build_vocabulary, generate_corpus, GeneratorConfig};
use fashionfae::model::{FashionFae, ModelConfig};
use fashionfae::objectives::mask_patches;
use fashionfae::patches::{collect_patches, extract_patches, train_codebook};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fashionfae::Result<()> {
    let corpus = generate_corpus(&GeneratorConfig::with_total(4, 32, 8), 11)?;
    let vocab = build_vocabulary(&corpus)?;
    let grids: Vec<_> = corpus
        .iter()
        .map(|it| extract_patches(&it.image, 8))
        .collect::<fashionfae::Result<_>>()?;
    let refs = collect_patches(&grids);
    let codebook = train_codebook(&refs, 16, 25, 1)?;

    let cfg = ModelConfig::desk(vocab.len(), codebook.k());
    let model = FashionFae::new(cfg, 5)?;
    let input = build_text_input(&corpus[0], &vocab)?;

    // (a) contrastive mode
    let mut g = Graph::new();
    let pair = model.forward_contrastive(&mut g, &input.tokens, &grids[0])?;
    println!(
        "contrastive: image states {:?}, text states {:?}, pooled dims {:?}/{:?}",
        g.shape(pair.image_states),
        g.shape(pair.text_states),
        g.shape(pair.pooled_v),
        g.shape(pair.pooled_w)
    );

    // (b) fusion mode
    let fused = model.forward_fusion(&mut g, &input.tokens, pair.image_states)?;
    println!("fusion: fused states {:?} (CLS at row 0)", g.shape(fused));

    // (c) image reconstruction mode
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let plan = mask_patches(&grids[0], &codebook, &mut rng)?;
    let recon = model.forward_reconstruction(&mut g, &input.tokens, &grids[0], &plan.positions)?;
    println!(
        "reconstruction: {} masked patches -> logits {:?} over {} labels",
        plan.positions.len(),
        g.shape(recon.logits),
        codebook.k()
    );

    // fusion token reduces to LN(v_cls + w_cls) when the MLP is zeroed
    for p in [
        &model.fusion_mlp.w1,
        &model.fusion_mlp.b1,
        &model.fusion_mlp.w2,
        &model.fusion_mlp.b2,
    ] {
        for v in p.value_mut().data_mut() {
            *v = 0.0;
        }
    }
    let mut g2 = Graph::new();
    let d = model.config().embed_dim;
    let v_cls = g2.leaf(Tensor::row((0..d).map(|i| (i as f64 * 0.1).sin()).collect()));
    let w_cls = g2.leaf(Tensor::row((0..d).map(|i| (i as f64 * 0.2).cos()).collect()));
    let f = model.fusion_token(&mut g2, v_cls, w_cls)?;
    let sum = g2.add(v_cls, w_cls)?;
    let gain = g2.param(&model.fusion_ln.gain);
    let bias = g2.param(&model.fusion_ln.bias);
    let ln = g2.layer_norm(sum, gain, bias, 1e-5)?;
    let max_diff = g2
        .data(f)
        .iter()
        .zip(g2.data(ln))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("\nzero-MLP fusion token vs LN(v_cls + w_cls): max |diff| = {max_diff:.2e}");
    Ok(())
}
