//! Fine-tune a category recognition head over the fused CLS state.

use fashionfae::corpus::{build_vocabulary, generate_corpus, GeneratorConfig};
use fashionfae::model::{FashionFae, ModelConfig};
use fashionfae::patches::{collect_patches, train_codebook};
use fashionfae::training::{finetune_classifier, FinetuneConfig, LabelField, PreparedCorpus};

fn main() -> fashionfae::Result<()> {
    let corpus = generate_corpus(&GeneratorConfig::with_total(16, 32, 8), 21)?;
    let vocab = build_vocabulary(&corpus)?;
    let data = PreparedCorpus::prepare(&corpus, &vocab, 8)?;
    let refs = collect_patches(&data.grids);
    let codebook = train_codebook(&refs, 16, 25, 1)?;

    let mut cfg = ModelConfig::tiny(vocab.len(), codebook.k());
    cfg.embed_dim = 16;
    cfg.patch_size = 8;
    cfg.max_text_len = data.inputs.iter().map(|t| t.len()).max().unwrap();
    let model = FashionFae::new(cfg, 3)?;

    for (field, steps) in [(LabelField::Category, 200), (LabelField::Subcategory, 200)] {
        let out = finetune_classifier(
            &model,
            &data,
            &corpus,
            field,
            &FinetuneConfig {
                steps,
                batch_size: 8,
                ..FinetuneConfig::default()
            },
        )?;
        println!(
            "{}: {} classes, training accuracy {:.3}, macro-F1 {:.3}",
            field.as_str(),
            out.classes.len(),
            out.accuracy,
            out.macro_f1
        );
    }
    println!("(the category statement sits in the input text, so the head can read it)");
    Ok(())
}
