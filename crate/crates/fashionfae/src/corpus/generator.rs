//! Procedural corpus generator (FashionGen stand-in).
//!
//! Attributes are drawn from closed vocabularies and the image is rendered
//! deterministically from them: the category fixes the garment shape, the
//! composition fixes the texture pattern, and the title's color word fixes
//! the hue. Attributes are therefore recoverable from pixels.

use std::collections::HashSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Attributes, Image, ItemRecord};
use crate::error::{Error, Result};

pub const CATEGORIES: [&str; 4] = ["shirts", "pants", "dresses", "sweaters"];
const CATEGORY_NOUNS: [&str; 4] = ["shirt", "pants", "dress", "sweater"];
pub const SUBCATEGORIES: [[&str; 3]; 4] = [
    ["tee", "polo", "flannel"],
    ["jeans", "chinos", "shorts"],
    ["gown", "sundress", "tunic"],
    ["cardigan", "pullover", "hoodie"],
];
pub const GENDERS: [&str; 3] = ["men", "women", "unisex"];
pub const SEASONS: [&str; 4] = ["spring", "summer", "autumn", "winter"];
pub const COMPOSITIONS: [&str; 4] = ["cotton", "denim", "silk", "wool"];
pub const STYLES: [&str; 5] = ["classic", "modern", "vintage", "sporty", "elegant"];

/// Color words with the RGB multipliers they select.
pub const COLORS: [(&str, [f32; 3]); 8] = [
    ("black", [0.20, 0.20, 0.20]),
    ("white", [1.00, 1.00, 1.00]),
    ("red", [0.90, 0.15, 0.15]),
    ("blue", [0.15, 0.25, 0.90]),
    ("green", [0.15, 0.80, 0.20]),
    ("yellow", [0.95, 0.90, 0.15]),
    ("purple", [0.60, 0.20, 0.80]),
    ("orange", [0.95, 0.55, 0.10]),
];

const BACKGROUND: f32 = 0.15;
const TEXTURE_LOW: f32 = 0.45;

#[derive(Debug, Clone, Copy)]
pub struct GeneratorConfig {
    /// Item count per category, aligned with [`CATEGORIES`].
    pub counts_per_category: [usize; 4],
    /// Square image side length.
    pub image_size: usize,
    /// Patch side length the images must tile into.
    pub patch_size: usize,
}

impl GeneratorConfig {
    /// Spreads `total` items over the categories, earliest categories
    /// taking the remainder.
    pub fn with_total(total: usize, image_size: usize, patch_size: usize) -> Self {
        let base = total / CATEGORIES.len();
        let rem = total % CATEGORIES.len();
        let mut counts = [base; 4];
        for (i, c) in counts.iter_mut().enumerate() {
            if i < rem {
                *c += 1;
            }
        }
        GeneratorConfig {
            counts_per_category: counts,
            image_size,
            patch_size,
        }
    }

    pub fn total(&self) -> usize {
        self.counts_per_category.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::invalid("generator config requests zero items"));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::IndivisiblePatch {
                height: self.image_size,
                width: self.image_size,
                patch_size: self.patch_size,
            });
        }
        Ok(())
    }
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig::with_total(64, 32, 8)
    }
}

/// Per-item rendering variation, drawn from the item's seeded stream.
#[derive(Debug, Clone, Copy)]
pub struct RenderJitter {
    pub dx: i64,
    pub dy: i64,
    pub phase: usize,
    pub brightness: f32,
}

impl Default for RenderJitter {
    fn default() -> Self {
        RenderJitter {
            dx: 0,
            dy: 0,
            phase: 0,
            brightness: 1.0,
        }
    }
}

impl RenderJitter {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        RenderJitter {
            dx: rng.gen_range(-2..=2),
            dy: rng.gen_range(-2..=2),
            phase: rng.gen_range(0..4),
            brightness: 0.85 + 0.15 * rng.gen::<f32>(),
        }
    }
}

fn category_index(category: &str) -> usize {
    CATEGORIES
        .iter()
        .position(|c| *c == category)
        .expect("category from the closed set")
}

fn in_shape(cat_idx: usize, y: i64, x: i64, s: i64) -> bool {
    match cat_idx {
        // shirts: body rectangle plus a shoulder band
        0 => {
            let body = y >= s / 4 && y < s * 13 / 16 && x >= s / 5 && x < s * 4 / 5;
            let band = y >= s / 4 && y < s * 7 / 16 && x >= s / 16 && x < s * 15 / 16;
            body || band
        }
        // pants: two vertical legs
        1 => {
            let in_y = y >= s / 5 && y < s * 7 / 8;
            let left = x >= s / 4 && x < s * 13 / 32;
            let right = x >= s * 19 / 32 && x < s * 3 / 4;
            in_y && (left || right)
        }
        // dresses: downward-widening triangle
        2 => {
            let in_y = y >= s / 5 && y < s * 7 / 8;
            in_y && ((x - s / 2).abs() as f32) <= (y - s / 5) as f32 * 0.45
        }
        // sweaters: diamond
        _ => ((x - s / 2).abs() + (y - s / 2).abs()) as f32 <= s as f32 * 0.36,
    }
}

fn texture_level(composition: &str, y: i64, x: i64, phase: i64) -> f32 {
    let hit = match composition {
        "cotton" => ((y + phase).div_euclid(3)).rem_euclid(2) == 0,
        "denim" => ((x + phase).div_euclid(3)).rem_euclid(2) == 0,
        "silk" => (x.div_euclid(4) + y.div_euclid(4) + phase).rem_euclid(2) == 0,
        _ => (y + phase).rem_euclid(5) < 2 && (x + phase).rem_euclid(5) < 2,
    };
    if hit {
        1.0
    } else {
        TEXTURE_LOW
    }
}

fn color_rgb(color_word: &str) -> [f32; 3] {
    COLORS
        .iter()
        .find(|(w, _)| *w == color_word)
        .map(|(_, rgb)| *rgb)
        .unwrap_or([0.5, 0.5, 0.5])
}

/// Renders an image purely from the attributes plus jitter. The title's
/// first word selects the hue; every pixel is `base * rgb[c]`.
pub fn render_image(attrs: &Attributes, jitter: &RenderJitter, size: usize) -> Image {
    let cat_idx = category_index(&attrs.category);
    let color_word = attrs.title.split_whitespace().next().unwrap_or("");
    let rgb = color_rgb(color_word);
    let s = size as i64;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..s {
        for x in 0..s {
            let base = if in_shape(cat_idx, y + jitter.dy, x + jitter.dx, s) {
                texture_level(&attrs.composition, y, x, jitter.phase as i64) * jitter.brightness
            } else {
                BACKGROUND
            };
            for channel in rgb {
                data.push((base * channel) as f64);
            }
        }
    }
    Image {
        height: size,
        width: size,
        channels: 3,
        data,
    }
}

fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 on the combined value
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw_description(rng: &mut ChaCha8Rng, attrs: &Attributes, noun: &str, style: &str) -> String {
    let color = attrs.title.split_whitespace().next().unwrap_or("plain");
    match rng.gen_range(0..4u32) {
        0 => format!(
            "a {} {} {} for {}",
            color, attrs.subcategory, noun, attrs.gender
        ),
        1 => format!("{} {} {} in {}", style, attrs.composition, noun, color),
        2 => format!("soft {} {} made of {}", color, noun, attrs.composition),
        _ => format!("the {} {} for {} days", attrs.subcategory, noun, attrs.season),
    }
}

/// Deterministically generates the synthetic corpus. Each item draws from
/// its own derived stream, and (attributes, description) tuples are unique
/// across the corpus.
pub fn generate_corpus(config: &GeneratorConfig, seed: u64) -> Result<Vec<ItemRecord>> {
    config.validate()?;
    let mut corpus = Vec::with_capacity(config.total());
    let mut seen: HashSet<(Attributes, String)> = HashSet::new();
    let mut index: u64 = 0;
    for (cat_idx, &count) in config.counts_per_category.iter().enumerate() {
        for _ in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index));
            let mut attempt = 0;
            let (attrs, description, jitter) = loop {
                let color = COLORS[rng.gen_range(0..COLORS.len())].0;
                let style = STYLES[rng.gen_range(0..STYLES.len())];
                let composition = COMPOSITIONS[rng.gen_range(0..COMPOSITIONS.len())];
                let noun = CATEGORY_NOUNS[cat_idx];
                let attrs = Attributes {
                    title: format!("{color} {style} {composition} {noun}"),
                    category: CATEGORIES[cat_idx].to_string(),
                    subcategory: SUBCATEGORIES[cat_idx][rng.gen_range(0..3)].to_string(),
                    gender: GENDERS[rng.gen_range(0..GENDERS.len())].to_string(),
                    composition: composition.to_string(),
                    season: SEASONS[rng.gen_range(0..SEASONS.len())].to_string(),
                };
                let description = draw_description(&mut rng, &attrs, noun, style);
                let key = (attrs.clone(), description.clone());
                if !seen.contains(&key) {
                    seen.insert(key);
                    break (attrs, description, RenderJitter::draw(&mut rng));
                }
                attempt += 1;
                if attempt > 256 {
                    return Err(Error::invalid(
                        "could not draw a unique item; category count too large for the closed vocabularies",
                    ));
                }
            };
            let image = render_image(&attrs, &jitter, config.image_size);
            corpus.push(ItemRecord {
                item_id: format!("item-{index:04}"),
                image,
                description,
                attributes: attrs,
            });
            index += 1;
        }
    }
    Ok(corpus)
}
