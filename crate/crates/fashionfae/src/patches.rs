//! Offline image tokenizer: patch extraction and a codebook quantizer that
//! maps patches to discrete labels by nearest centroid.
//!
//! Codebook file layout (little-endian): magic "FFVQ", u32 K, u32 d, then
//! K*d float32 code entries.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::checkpoint::{read_u32, write_u32};
use crate::corpus::Image;
use crate::error::{Error, Result};

const CODEBOOK_MAGIC: &[u8; 4] = b"FFVQ";

/// Row-major grid of flattened patch vectors from one image.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    patches: Vec<Vec<f64>>,
    pub grid_height: usize,
    pub grid_width: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl PatchGrid {
    /// Builds a grid directly from flattened patch vectors.
    pub fn from_patches(
        patches: Vec<Vec<f64>>,
        grid_height: usize,
        grid_width: usize,
        patch_size: usize,
        channels: usize,
    ) -> Result<Self> {
        if patches.len() != grid_height * grid_width {
            return Err(Error::invalid(format!(
                "{} patches do not fill a {}x{} grid",
                patches.len(),
                grid_height,
                grid_width
            )));
        }
        let dim = patch_size * patch_size * channels;
        if patches.iter().any(|p| p.len() != dim) {
            return Err(Error::invalid(format!("every patch must have length {dim}")));
        }
        Ok(PatchGrid {
            patches,
            grid_height,
            grid_width,
            patch_size,
            channels,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.patches.len()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        &self.patches[i]
    }

    pub fn patches(&self) -> &[Vec<f64>] {
        &self.patches
    }

    /// Inverse of [`extract_patches`]; used to assert the tiling is exact.
    pub fn reassemble(&self) -> Image {
        let p = self.patch_size;
        let c = self.channels;
        let height = self.grid_height * p;
        let width = self.grid_width * p;
        let mut data = vec![0.0; height * width * c];
        for (i, patch) in self.patches.iter().enumerate() {
            let gy = i / self.grid_width;
            let gx = i % self.grid_width;
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..c {
                        let y = gy * p + py;
                        let x = gx * p + px;
                        data[(y * width + x) * c + ch] = patch[(py * p + px) * c + ch];
                    }
                }
            }
        }
        Image {
            height,
            width,
            channels: c,
            data,
        }
    }
}

/// Splits an image into a non-overlapping, exhaustive row-major patch grid.
pub fn extract_patches(image: &Image, patch_size: usize) -> Result<PatchGrid> {
    if patch_size == 0
        || !image.height.is_multiple_of(patch_size)
        || !image.width.is_multiple_of(patch_size)
    {
        return Err(Error::IndivisiblePatch {
            height: image.height,
            width: image.width,
            patch_size,
        });
    }
    let grid_height = image.height / patch_size;
    let grid_width = image.width / patch_size;
    let c = image.channels;
    let mut patches = Vec::with_capacity(grid_height * grid_width);
    for gy in 0..grid_height {
        for gx in 0..grid_width {
            let mut v = Vec::with_capacity(patch_size * patch_size * c);
            for py in 0..patch_size {
                for px in 0..patch_size {
                    for ch in 0..c {
                        v.push(image.at(gy * patch_size + py, gx * patch_size + px, ch));
                    }
                }
            }
            patches.push(v);
        }
    }
    Ok(PatchGrid {
        patches,
        grid_height,
        grid_width,
        patch_size,
        channels: c,
    })
}

/// K visual code vectors plus training metadata.
#[derive(Debug, Clone)]
pub struct Codebook {
    codes: Vec<Vec<f64>>,
    dim: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.codes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn code(&self, j: usize) -> &[f64] {
        &self.codes[j]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest code by squared Euclidean distance; ties break to the lowest
/// index.
pub fn quantize(patch: &[f64], codebook: &Codebook) -> Result<usize> {
    if patch.len() != codebook.dim {
        return Err(Error::invalid(format!(
            "patch length {} does not match codebook dim {}",
            patch.len(),
            codebook.dim
        )));
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, code) in codebook.codes.iter().enumerate() {
        let d = sq_dist(patch, code);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    Ok(best)
}

fn total_error(patches: &[&[f64]], codes: &[Vec<f64>]) -> f64 {
    patches
        .iter()
        .map(|p| {
            codes
                .iter()
                .map(|c| sq_dist(p, c))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Rounds code entries to f32 precision so the in-memory codebook matches
/// its serialized form exactly.
fn round_codes_to_f32(codes: &mut [Vec<f64>]) {
    for code in codes.iter_mut() {
        for v in code.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// Trains the codebook by iterative centroid refinement with seeded
/// initialization from distinct patches. Empty clusters are repaired by
/// reassigning the point farthest from its centroid.
pub fn train_codebook(patches: &[&[f64]], k: usize, iters: usize, seed: u64) -> Result<Codebook> {
    if k == 0 {
        return Err(Error::invalid("codebook size must be at least 1"));
    }
    let dim = patches.first().map(|p| p.len()).unwrap_or(0);
    if dim == 0 {
        return Err(Error::invalid("no patches to train on"));
    }
    let mut distinct: Vec<&[f64]> = Vec::new();
    for p in patches {
        if !distinct.iter().any(|d| d == p) {
            distinct.push(p);
        }
    }
    if distinct.len() < k {
        return Err(Error::invalid(format!(
            "only {} distinct patches for k={k}",
            distinct.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..distinct.len()).collect();
    order.shuffle(&mut rng);
    let mut codes: Vec<Vec<f64>> = order[..k].iter().map(|&i| distinct[i].to_vec()).collect();

    let mut prev_error = f64::INFINITY;
    for _ in 0..iters {
        // assignment
        let mut assignment = vec![0usize; patches.len()];
        for (i, p) in patches.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in codes.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            assignment[i] = best;
        }
        // centroid update
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in patches.iter().enumerate() {
            let j = assignment[i];
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(*p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for s in sums[j].iter_mut() {
                    *s /= counts[j] as f64;
                }
                codes[j] = sums[j].clone();
            } else {
                // empty-cluster repair: take the point farthest from its centroid
                let (far_idx, _) = patches
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, sq_dist(p, &codes[assignment[i]])))
                    .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distances"))
                    .expect("non-empty patch set");
                codes[j] = patches[far_idx].to_vec();
            }
        }
        let err = total_error(patches, &codes);
        debug_assert!(
            err <= prev_error + 1e-9,
            "quantization error increased: {prev_error} -> {err}"
        );
        if (prev_error - err).abs() < 1e-15 {
            break;
        }
        prev_error = err;
    }

    round_codes_to_f32(&mut codes);

    // ensure no two codes are identical after rounding (pull duplicates
    // onto distinct patches)
    for j in 1..k {
        let mut guard = 0;
        while codes[..j].iter().any(|c| *c == codes[j]) {
            let mut replacement = vec![distinct[(j + guard) % distinct.len()].to_vec()];
            round_codes_to_f32(&mut replacement);
            codes[j] = replacement.pop().expect("one entry");
            guard += 1;
            if guard > distinct.len() {
                break;
            }
        }
    }
    Ok(Codebook {
        codes,
        dim,
        iterations: iters,
        seed,
    })
}

/// Collects patch references from many grids (training set for the
/// codebook).
pub fn collect_patches(grids: &[PatchGrid]) -> Vec<&[f64]> {
    grids
        .iter()
        .flat_map(|g| g.patches().iter().map(|p| p.as_slice()))
        .collect()
}

pub fn save_codebook(path: &Path, codebook: &Codebook) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(CODEBOOK_MAGIC).map_err(|e| Error::io(path, e))?;
    write_u32(&mut w, codebook.k() as u32).map_err(|e| Error::io(path, e))?;
    write_u32(&mut w, codebook.dim as u32).map_err(|e| Error::io(path, e))?;
    for code in &codebook.codes {
        for &v in code {
            w.write_all(&(v as f32).to_le_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_codebook(path: &Path) -> Result<Codebook> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != CODEBOOK_MAGIC {
        return Err(Error::format(path, "bad magic, expected FFVQ"));
    }
    let k = read_u32(&mut r).map_err(|e| Error::io(path, e))? as usize;
    let dim = read_u32(&mut r).map_err(|e| Error::io(path, e))? as usize;
    let mut codes = Vec::with_capacity(k);
    let mut buf = [0u8; 4];
    for _ in 0..k {
        let mut code = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
            code.push(f32::from_le_bytes(buf) as f64);
        }
        codes.push(code);
    }
    Ok(Codebook {
        codes,
        dim,
        iterations: 0,
        seed: 0,
    })
}
