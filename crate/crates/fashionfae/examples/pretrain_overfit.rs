//! Pre-train on a handful of items and watch training-set retrieval climb.

use fashionfae::corpus::{build_vocabulary, generate_corpus, GeneratorConfig};
use fashionfae::eval::{embed_corpus, protocol_full, Direction};
use fashionfae::model::{FashionFae, ModelConfig};
use fashionfae::patches::{collect_patches, train_codebook};
use fashionfae::training::{pretrain, PreparedCorpus, RunConfig, TrainState};

fn main() -> fashionfae::Result<()> {
    let corpus = generate_corpus(&GeneratorConfig::with_total(16, 32, 8), 7)?;
    let vocab = build_vocabulary(&corpus)?;
    let data = PreparedCorpus::prepare(&corpus, &vocab, 8)?;
    let refs = collect_patches(&data.grids);
    let codebook = train_codebook(&refs, 32, 25, 1)?;

    let cfg = RunConfig {
        batch_size: 8,
        embed_dim: 32,
        n_layers_text_fusion: 2,
        split_point: 1,
        n_layers_image: 1,
        n_heads: 4,
        ..RunConfig::default()
    };
    let model_cfg = ModelConfig {
        embed_dim: cfg.embed_dim,
        n_layers_text_fusion: cfg.n_layers_text_fusion,
        split_point: cfg.split_point,
        n_layers_image: cfg.n_layers_image,
        n_heads: cfg.n_heads,
        vocab_size: vocab.len(),
        patch_labels: codebook.k(),
        max_text_len: data.inputs.iter().map(|t| t.len()).max().unwrap(),
        max_patches: 16,
        patch_size: 8,
    };
    let model = FashionFae::new(model_cfg, cfg.seed)?;
    let mut state = TrainState::fresh(model.params(), &cfg);

    let recall = |model: &FashionFae, data: &PreparedCorpus| -> fashionfae::Result<(f64, f64)> {
        let feats = embed_corpus(model, &data.inputs, &data.grids)?;
        let i2t = protocol_full(&feats, &data.ids, Direction::I2T)?;
        let t2i = protocol_full(&feats, &data.ids, Direction::T2I)?;
        Ok((i2t.r_at_1, t2i.r_at_1))
    };

    let (r1_i, r1_t) = recall(&model, &data)?;
    println!("before training: full-protocol R@1 i2t {r1_i:.1} / t2i {r1_t:.1}");

    for round in 1..=4 {
        let rows = pretrain(
            &model,
            &data,
            &codebook,
            vocab.mask_id(),
            &cfg,
            &mut state,
            150,
            None,
        )?;
        let mean_loss: f64 = rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
        let (r1_i, r1_t) = recall(&model, &data)?;
        println!(
            "after {:4} steps: mean loss {:.3}, R@1 i2t {:.1} / t2i {:.1}",
            round * 150,
            mean_loss,
            r1_i,
            r1_t
        );
    }
    Ok(())
}
