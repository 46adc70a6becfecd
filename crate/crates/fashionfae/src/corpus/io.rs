//! Corpus serialization: `items.jsonl` + per-item image files + `vocab.txt`.
//!
//! Image file layout (little-endian): magic "FFAE", u32 height, width,
//! channels, then H*W*C float32 intensities.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::{read_u32, write_u32};
use crate::corpus::{Attributes, Image, ItemRecord, Vocabulary};
use crate::error::{Error, Result};

const IMAGE_MAGIC: &[u8; 4] = b"FFAE";

#[derive(Serialize, Deserialize)]
struct ItemLine {
    item_id: String,
    description: String,
    attributes: Attributes,
}

pub fn save_image(path: &Path, image: &Image) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(IMAGE_MAGIC).map_err(|e| Error::io(path, e))?;
    write_u32(&mut w, image.height as u32).map_err(|e| Error::io(path, e))?;
    write_u32(&mut w, image.width as u32).map_err(|e| Error::io(path, e))?;
    write_u32(&mut w, image.channels as u32).map_err(|e| Error::io(path, e))?;
    for &v in &image.data {
        w.write_all(&(v as f32).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_image(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != IMAGE_MAGIC {
        return Err(Error::format(path, "bad magic, expected FFAE"));
    }
    let height = read_u32(&mut r).map_err(|e| Error::io(path, e))? as usize;
    let width = read_u32(&mut r).map_err(|e| Error::io(path, e))? as usize;
    let channels = read_u32(&mut r).map_err(|e| Error::io(path, e))? as usize;
    let n = height * width * channels;
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for _ in 0..n {
        r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    Ok(Image {
        height,
        width,
        channels,
        data,
    })
}

/// Writes `items.jsonl` and `images/<item_id>.ffae` under `dir`.
pub fn save_corpus(dir: &Path, corpus: &[ItemRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let items_path = dir.join("items.jsonl");
    let file = File::create(&items_path).map_err(|e| Error::io(&items_path, e))?;
    let mut w = BufWriter::new(file);
    for item in corpus {
        let line = ItemLine {
            item_id: item.item_id.clone(),
            description: item.description.clone(),
            attributes: item.attributes.clone(),
        };
        let json = serde_json::to_string(&line).map_err(|e| Error::Json {
            path: items_path.clone(),
            source: e,
        })?;
        writeln!(w, "{json}").map_err(|e| Error::io(&items_path, e))?;
        save_image(&images_dir.join(format!("{}.ffae", item.item_id)), &item.image)?;
    }
    w.flush().map_err(|e| Error::io(&items_path, e))?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Vec<ItemRecord>> {
    let items_path = dir.join("items.jsonl");
    let file = File::open(&items_path).map_err(|e| Error::io(&items_path, e))?;
    let r = BufReader::new(file);
    let mut corpus = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(&items_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ItemLine = serde_json::from_str(&line).map_err(|e| Error::Config {
            path: items_path.clone(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        let image = load_image(&dir.join("images").join(format!("{}.ffae", parsed.item_id)))?;
        corpus.push(ItemRecord {
            item_id: parsed.item_id,
            image,
            description: parsed.description,
            attributes: parsed.attributes,
        });
    }
    Ok(corpus)
}

/// One token per line; the line number is the id.
pub fn save_vocabulary(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for token in vocab.tokens() {
        writeln!(w, "{token}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_vocabulary(path: &Path) -> Result<Vocabulary> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tokens: Vec<String> = content.lines().map(|l| l.to_string()).collect();
    if tokens.len() < 5 {
        return Err(Error::format(path, "vocabulary shorter than the special tokens"));
    }
    Vocabulary::from_tokens(tokens).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, generate_corpus, GeneratorConfig};

    #[test]
    fn corpus_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GeneratorConfig::with_total(8, 16, 4);
        let corpus = generate_corpus(&cfg, 42).unwrap();
        save_corpus(dir.path(), &corpus).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(loaded.len(), corpus.len());
        for (a, b) in corpus.iter().zip(&loaded) {
            assert_eq!(a.item_id, b.item_id);
            assert_eq!(a.description, b.description);
            assert_eq!(a.attributes, b.attributes);
            assert_eq!(a.image, b.image, "f32 storage must be lossless");
        }
    }

    #[test]
    fn vocab_round_trip() {
        let cfg = GeneratorConfig::with_total(8, 16, 4);
        let corpus = generate_corpus(&cfg, 42).unwrap();
        let vocab = build_vocabulary(&corpus).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        save_vocabulary(&path, &vocab).unwrap();
        let loaded = load_vocabulary(&path).unwrap();
        assert_eq!(vocab.tokens(), loaded.tokens());
    }
}
