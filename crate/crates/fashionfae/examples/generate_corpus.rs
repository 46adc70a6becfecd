//! Generate a small synthetic corpus, inspect the text construction, and
//! round-trip it through the on-disk format.

use fashionfae::corpus::{
    build_text_input, build_vocabulary, generate_corpus, load_corpus, render_attribute_statement,
    save_corpus, save_vocabulary, GeneratorConfig,
};

fn main() -> fashionfae::Result<()> {
    let config = GeneratorConfig::with_total(16, 32, 8);
    let corpus = generate_corpus(&config, 7)?;
    println!("generated {} items across 4 categories", corpus.len());

    let item = &corpus[0];
    println!("\nfirst item: {}", item.item_id);
    println!("  description: {}", item.description);
    for (name, value) in item.attributes.iter() {
        println!("  {}", render_attribute_statement(name.as_str(), value)?);
    }

    let vocab = build_vocabulary(&corpus)?;
    println!("\nvocabulary: {} tokens (incl. specials)", vocab.len());

    let input = build_text_input(item, &vocab)?;
    let decoded: Vec<&str> = input
        .tokens
        .iter()
        .map(|&id| vocab.token(id).unwrap())
        .collect();
    println!("model input ({} tokens): {}", input.len(), decoded.join(" "));
    println!(
        "description span {}..{}, title value span {}..{}",
        input.description_span.start,
        input.description_span.end,
        input.attribute_spans[0].start,
        input.attribute_spans[0].end
    );

    let dir = std::env::temp_dir().join("ffae_example_corpus");
    save_corpus(&dir, &corpus)?;
    save_vocabulary(&dir.join("vocab.txt"), &vocab)?;
    let reloaded = load_corpus(&dir)?;
    assert_eq!(reloaded.len(), corpus.len());
    assert_eq!(reloaded[0].image, corpus[0].image);
    println!("\nround-trip through {} is lossless", dir.display());
    Ok(())
}
