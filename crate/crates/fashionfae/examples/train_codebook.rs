//! Train the offline patch tokenizer and look at the label distribution it
//! assigns to the corpus.

use fashionfae::corpus::{generate_corpus, GeneratorConfig};
use fashionfae::patches::{collect_patches, extract_patches, quantize, train_codebook};

fn main() -> fashionfae::Result<()> {
    let corpus = generate_corpus(&GeneratorConfig::with_total(32, 32, 8), 3)?;
    let grids: Vec<_> = corpus
        .iter()
        .map(|it| extract_patches(&it.image, 8))
        .collect::<fashionfae::Result<_>>()?;
    let patches = collect_patches(&grids);
    println!(
        "{} patches of dim {} from {} images",
        patches.len(),
        grids[0].patch_dim(),
        grids.len()
    );

    let codebook = train_codebook(&patches, 16, 25, 1)?;
    println!("trained codebook: k={} dim={}", codebook.k(), codebook.dim());

    let mut histogram = vec![0usize; codebook.k()];
    for p in &patches {
        histogram[quantize(p, &codebook)?] += 1;
    }
    println!("\nlabel histogram:");
    for (label, count) in histogram.iter().enumerate() {
        let bar = "#".repeat(count * 60 / patches.len());
        println!("  {label:2}: {count:4} {bar}");
    }

    // idempotence: every code maps to itself
    for j in 0..codebook.k() {
        assert_eq!(quantize(codebook.code(j), &codebook)?, j);
    }
    println!("\nquantize(code_j) == j for all {} codes", codebook.k());
    Ok(())
}
