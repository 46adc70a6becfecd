//! The network: a patch-based image encoder, a parameter-shared text/fusion
//! encoder stack, the fusion token, and the three operating modes
//! (contrastive, fusion, image reconstruction).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::nn::{
    feed_forward, multi_head_attention, AttentionParams, EncoderBlockParams, LayerNormParams,
    MlpParams,
};
use crate::autodiff::{Graph, ParamRef, ParameterSet, Tensor, Value};
use crate::error::{Error, Result};
use crate::patches::PatchGrid;

/// Model dimensions and limits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// Total depth of the shared text/fusion stack.
    pub n_layers_text_fusion: usize,
    /// How many of those layers act as the text encoder when the stack is
    /// split; the rest form the fusion encoder.
    pub split_point: usize,
    pub n_layers_image: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    /// Codebook size K: the patch-label space.
    pub patch_labels: usize,
    pub max_text_len: usize,
    pub max_patches: usize,
    pub patch_size: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: small enough for finite-difference work, large
    /// enough to overfit a 64-item corpus.
    pub fn desk(vocab_size: usize, patch_labels: usize) -> Self {
        ModelConfig {
            embed_dim: 64,
            n_layers_text_fusion: 4,
            split_point: 2,
            n_layers_image: 2,
            n_heads: 4,
            vocab_size,
            patch_labels,
            max_text_len: 64,
            max_patches: 16,
            patch_size: 8,
        }
    }

    /// Minimal configuration for exhaustive gradient checks.
    pub fn tiny(vocab_size: usize, patch_labels: usize) -> Self {
        ModelConfig {
            embed_dim: 8,
            n_layers_text_fusion: 2,
            split_point: 1,
            n_layers_image: 1,
            n_heads: 2,
            vocab_size,
            patch_labels,
            max_text_len: 64,
            max_patches: 16,
            patch_size: 4,
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.split_point == 0 || self.split_point >= self.n_layers_text_fusion {
            return Err(Error::invalid(format!(
                "split_point {} must lie strictly inside the {}-layer stack",
                self.split_point, self.n_layers_text_fusion
            )));
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.patch_labels == 0 {
            return Err(Error::invalid("vocab_size and patch_labels must be positive"));
        }
        Ok(())
    }

    /// Flat key=value serialization, written alongside checkpoints.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "embed_dim={}", self.embed_dim);
        let _ = writeln!(s, "n_layers_text_fusion={}", self.n_layers_text_fusion);
        let _ = writeln!(s, "split_point={}", self.split_point);
        let _ = writeln!(s, "n_layers_image={}", self.n_layers_image);
        let _ = writeln!(s, "n_heads={}", self.n_heads);
        let _ = writeln!(s, "vocab_size={}", self.vocab_size);
        let _ = writeln!(s, "patch_labels={}", self.patch_labels);
        let _ = writeln!(s, "max_text_len={}", self.max_text_len);
        let _ = writeln!(s, "max_patches={}", self.max_patches);
        let _ = writeln!(s, "patch_size={}", self.patch_size);
        s
    }

    pub fn from_kv_str(content: &str, path: &Path) -> Result<Self> {
        let mut values: HashMap<&str, usize> = HashMap::new();
        for (idx, raw) in content.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                path: path.to_path_buf(),
                line: idx + 1,
                message: "expected key=value".into(),
            })?;
            let parsed: usize = value.trim().parse().map_err(|_| Error::Config {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("invalid integer `{}`", value.trim()),
            })?;
            values.insert(key.trim(), parsed);
        }
        let get = |k: &str| {
            values.get(k).copied().ok_or_else(|| Error::Config {
                path: path.to_path_buf(),
                line: 0,
                message: format!("missing key `{k}`"),
            })
        };
        let cfg = ModelConfig {
            embed_dim: get("embed_dim")?,
            n_layers_text_fusion: get("n_layers_text_fusion")?,
            split_point: get("split_point")?,
            n_layers_image: get("n_layers_image")?,
            n_heads: get("n_heads")?,
            vocab_size: get("vocab_size")?,
            patch_labels: get("patch_labels")?,
            max_text_len: get("max_text_len")?,
            max_patches: get("max_patches")?,
            patch_size: get("patch_size")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_str(&content, path)
    }
}

/// Shared-stack block. Blocks above the split point carry a cross-attention
/// sublayer (used by the fusion and reconstruction modes); text-encoder
/// blocks below it do not.
pub struct SharedBlock {
    pub ln_self: LayerNormParams,
    pub self_attn: AttentionParams,
    pub cross: Option<(LayerNormParams, AttentionParams)>,
    pub ln_mlp: LayerNormParams,
    pub mlp: MlpParams,
}

impl SharedBlock {
    /// Text-only role: the cross-attention sublayer, if any, is bypassed.
    fn forward_text(&self, g: &mut Graph, x: Value, n_heads: usize) -> Result<Value> {
        let normed = self.ln_self.apply(g, x)?;
        let attn = multi_head_attention(g, normed, normed, &self.self_attn, n_heads, None)?;
        let x = g.add(x, attn)?;
        let normed = self.ln_mlp.apply(g, x)?;
        let mlp = feed_forward(g, normed, &self.mlp)?;
        g.add(x, mlp)
    }

    /// Fusion role: queries from `x`, cross-attention keys/values from the
    /// other modality's states.
    fn forward_cross(&self, g: &mut Graph, x: Value, kv: Value, n_heads: usize) -> Result<Value> {
        let (ln_cross, cross_attn) = self
            .cross
            .as_ref()
            .ok_or_else(|| Error::invalid("block below the split point has no cross-attention"))?;
        let normed = self.ln_self.apply(g, x)?;
        let attn = multi_head_attention(g, normed, normed, &self.self_attn, n_heads, None)?;
        let x = g.add(x, attn)?;
        let normed = ln_cross.apply(g, x)?;
        let cross = multi_head_attention(g, normed, kv, cross_attn, n_heads, None)?;
        let x = g.add(x, cross)?;
        let normed = self.ln_mlp.apply(g, x)?;
        let mlp = feed_forward(g, normed, &self.mlp)?;
        g.add(x, mlp)
    }

    fn param_refs(&self) -> Vec<ParamRef> {
        let mut out = vec![
            self.ln_self.gain.clone(),
            self.ln_self.bias.clone(),
            self.self_attn.wq.clone(),
            self.self_attn.wk.clone(),
            self.self_attn.wv.clone(),
            self.self_attn.wo.clone(),
        ];
        if let Some((ln, attn)) = &self.cross {
            out.extend([
                ln.gain.clone(),
                ln.bias.clone(),
                attn.wq.clone(),
                attn.wk.clone(),
                attn.wv.clone(),
                attn.wo.clone(),
            ]);
        }
        out.extend([
            self.ln_mlp.gain.clone(),
            self.ln_mlp.bias.clone(),
            self.mlp.w1.clone(),
            self.mlp.b1.clone(),
            self.mlp.w2.clone(),
            self.mlp.b2.clone(),
        ]);
        out
    }
}

/// Linear head (weight + bias).
pub struct Head {
    pub w: ParamRef,
    pub b: ParamRef,
}

impl Head {
    pub fn apply(&self, g: &mut Graph, x: Value) -> Result<Value> {
        let w = g.param(&self.w);
        let b = g.param(&self.b);
        let out = g.matmul(x, w)?;
        g.add_row(out, b)
    }
}

/// Outputs of the contrastive mode for one item.
pub struct EncodedPair {
    /// Image token states, v_cls at row 0.
    pub image_states: Value,
    /// Text token states, w_cls at row 0.
    pub text_states: Value,
    pub v_cls: Value,
    pub w_cls: Value,
    /// Fusion token F.
    pub fusion: Value,
    pub pooled_v: Value,
    pub pooled_w: Value,
}

/// Outputs of the reconstruction mode.
pub struct ReconstructionOut {
    /// K-way logits for each masked position, in mask order.
    pub logits: Value,
    /// Image state sequence after masked rows were replaced by F.
    pub masked_states: Value,
}

pub struct FashionFae {
    cfg: ModelConfig,
    params: ParameterSet,
    pub token_embedding: ParamRef,
    pub text_pos: ParamRef,
    pub image_cls: ParamRef,
    pub image_pos: ParamRef,
    pub patch_proj_w: ParamRef,
    pub patch_proj_b: ParamRef,
    pub image_blocks: Vec<EncoderBlockParams>,
    pub image_final_ln: LayerNormParams,
    pub shared_blocks: Vec<SharedBlock>,
    pub text_final_ln: LayerNormParams,
    pub fusion_mlp: MlpParams,
    pub fusion_ln: LayerNormParams,
    /// Word prediction head, shared by the attribute and subword objectives.
    pub text_head: Head,
    /// K-way patch label head.
    pub patch_head: Head,
    /// Binary match head.
    pub match_head: Head,
}

const INIT_RANGE: f64 = 0.05;

struct Builder {
    params: ParameterSet,
    rng: ChaCha8Rng,
}

impl Builder {
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> Result<ParamRef> {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-INIT_RANGE..INIT_RANGE));
        self.params.create(name, t)
    }

    fn zeros(&mut self, name: String, rows: usize, cols: usize) -> Result<ParamRef> {
        self.params.create(name, Tensor::zeros(rows, cols))
    }

    fn layer_norm(&mut self, prefix: &str, dim: usize) -> Result<LayerNormParams> {
        Ok(LayerNormParams {
            gain: self
                .params
                .create(format!("{prefix}.gain"), Tensor::row(vec![1.0; dim]))?,
            bias: self.zeros(format!("{prefix}.bias"), 1, dim)?,
        })
    }

    fn attention(&mut self, prefix: &str, dim: usize) -> Result<AttentionParams> {
        Ok(AttentionParams {
            wq: self.weight(format!("{prefix}.wq"), dim, dim)?,
            wk: self.weight(format!("{prefix}.wk"), dim, dim)?,
            wv: self.weight(format!("{prefix}.wv"), dim, dim)?,
            wo: self.weight(format!("{prefix}.wo"), dim, dim)?,
        })
    }

    fn mlp(&mut self, prefix: &str, dim: usize, hidden: usize) -> Result<MlpParams> {
        Ok(MlpParams {
            w1: self.weight(format!("{prefix}.w1"), dim, hidden)?,
            b1: self.zeros(format!("{prefix}.b1"), 1, hidden)?,
            w2: self.weight(format!("{prefix}.w2"), hidden, dim)?,
            b2: self.zeros(format!("{prefix}.b2"), 1, dim)?,
        })
    }
}

impl FashionFae {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let hidden = 4 * d;
        let mut b = Builder {
            params: ParameterSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };

        let token_embedding = b.weight("token_embedding".into(), cfg.vocab_size, d)?;
        let text_pos = b.weight("text_pos".into(), cfg.max_text_len, d)?;
        let image_cls = b.weight("image_cls".into(), 1, d)?;
        let image_pos = b.weight("image_pos".into(), cfg.max_patches + 1, d)?;
        let patch_proj_w = b.weight("patch_proj.w".into(), cfg.patch_dim(), d)?;
        let patch_proj_b = b.zeros("patch_proj.b".into(), 1, d)?;

        let mut image_blocks = Vec::with_capacity(cfg.n_layers_image);
        for i in 0..cfg.n_layers_image {
            image_blocks.push(EncoderBlockParams {
                ln_attn: b.layer_norm(&format!("image.{i}.ln_attn"), d)?,
                attn: b.attention(&format!("image.{i}.attn"), d)?,
                ln_mlp: b.layer_norm(&format!("image.{i}.ln_mlp"), d)?,
                mlp: b.mlp(&format!("image.{i}.mlp"), d, hidden)?,
            });
        }
        let image_final_ln = b.layer_norm("image_final_ln", d)?;

        let mut shared_blocks = Vec::with_capacity(cfg.n_layers_text_fusion);
        for i in 0..cfg.n_layers_text_fusion {
            let cross = if i >= cfg.split_point {
                Some((
                    b.layer_norm(&format!("shared.{i}.ln_cross"), d)?,
                    b.attention(&format!("shared.{i}.cross_attn"), d)?,
                ))
            } else {
                None
            };
            shared_blocks.push(SharedBlock {
                ln_self: b.layer_norm(&format!("shared.{i}.ln_self"), d)?,
                self_attn: b.attention(&format!("shared.{i}.self_attn"), d)?,
                cross,
                ln_mlp: b.layer_norm(&format!("shared.{i}.ln_mlp"), d)?,
                mlp: b.mlp(&format!("shared.{i}.mlp"), d, hidden)?,
            });
        }
        let text_final_ln = b.layer_norm("text_final_ln", d)?;

        let fusion_mlp = b.mlp("fusion.mlp", d, d)?;
        let fusion_ln = b.layer_norm("fusion.ln", d)?;

        let text_head = Head {
            w: b.weight("head.text.w".into(), d, cfg.vocab_size)?,
            b: b.zeros("head.text.b".into(), 1, cfg.vocab_size)?,
        };
        let patch_head = Head {
            w: b.weight("head.patch.w".into(), d, cfg.patch_labels)?,
            b: b.zeros("head.patch.b".into(), 1, cfg.patch_labels)?,
        };
        let match_head = Head {
            w: b.weight("head.match.w".into(), d, 2)?,
            b: b.zeros("head.match.b".into(), 1, 2)?,
        };

        Ok(FashionFae {
            cfg,
            params: b.params,
            token_embedding,
            text_pos,
            image_cls,
            image_pos,
            patch_proj_w,
            patch_proj_b,
            image_blocks,
            image_final_ln,
            shared_blocks,
            text_final_ln,
            fusion_mlp,
            fusion_ln,
            text_head,
            patch_head,
            match_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    /// ViT-style image encoding: linear patch projection, learned positions,
    /// a prepended CLS token, and `n_layers_image` encoder blocks.
    pub fn encode_image(&self, g: &mut Graph, grid: &PatchGrid) -> Result<Value> {
        if grid.patch_dim() != self.cfg.patch_dim() {
            return Err(Error::invalid(format!(
                "patch dim {} does not match model patch dim {}",
                grid.patch_dim(),
                self.cfg.patch_dim()
            )));
        }
        if grid.patch_count() > self.cfg.max_patches {
            return Err(Error::invalid(format!(
                "{} patches exceed max_patches {}",
                grid.patch_count(),
                self.cfg.max_patches
            )));
        }
        let n = grid.patch_count();
        let mut flat = Vec::with_capacity(n * grid.patch_dim());
        for p in grid.patches() {
            flat.extend_from_slice(p);
        }
        let patches = g.leaf(Tensor::new(n, grid.patch_dim(), flat)?);
        let w = g.param(&self.patch_proj_w);
        let b = g.param(&self.patch_proj_b);
        let projected = g.matmul(patches, w)?;
        let projected = g.add_row(projected, b)?;
        let cls = g.param(&self.image_cls);
        let mut x = g.concat_rows(&[cls, projected])?;
        let pos_table = g.param(&self.image_pos);
        let pos_idx: Vec<usize> = (0..n + 1).collect();
        let pos = g.select_rows(pos_table, &pos_idx)?;
        x = g.add(x, pos)?;
        for block in &self.image_blocks {
            x = crate::autodiff::nn::transformer_block(g, x, block, self.cfg.n_heads)?;
        }
        self.image_final_ln.apply(g, x)
    }

    fn embed_tokens(&self, g: &mut Graph, tokens: &[usize]) -> Result<Value> {
        if tokens.is_empty() {
            return Err(Error::invalid("cannot encode an empty token sequence"));
        }
        if tokens.len() > self.cfg.max_text_len {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds max_text_len {}",
                tokens.len(),
                self.cfg.max_text_len
            )));
        }
        for &t in tokens {
            if t >= self.cfg.vocab_size {
                return Err(Error::invalid(format!(
                    "token id {t} out of range for vocab size {}",
                    self.cfg.vocab_size
                )));
            }
        }
        let table = g.param(&self.token_embedding);
        let emb = g.select_rows(table, tokens)?;
        let pos_table = g.param(&self.text_pos);
        let pos_idx: Vec<usize> = (0..tokens.len()).collect();
        let pos = g.select_rows(pos_table, &pos_idx)?;
        g.add(emb, pos)
    }

    /// Text-encoder role of the shared stack: layers [0, split_point).
    pub fn encode_text_prefix(&self, g: &mut Graph, tokens: &[usize]) -> Result<Value> {
        let mut x = self.embed_tokens(g, tokens)?;
        for block in &self.shared_blocks[..self.cfg.split_point] {
            x = block.forward_text(g, x, self.cfg.n_heads)?;
        }
        Ok(x)
    }

    /// Full-stack text encoding (contrastive mode): every shared layer in
    /// its text-only role, then the final layer norm.
    pub fn encode_text(&self, g: &mut Graph, tokens: &[usize]) -> Result<Value> {
        let mut x = self.encode_text_prefix(g, tokens)?;
        for block in &self.shared_blocks[self.cfg.split_point..] {
            x = block.forward_text(g, x, self.cfg.n_heads)?;
        }
        self.text_final_ln.apply(g, x)
    }

    /// Fusion token F = LN(MLP(v_cls + w_cls) + v_cls + w_cls).
    pub fn fusion_token(&self, g: &mut Graph, v_cls: Value, w_cls: Value) -> Result<Value> {
        let sum = g.add(v_cls, w_cls)?;
        let mlp_out = feed_forward(g, sum, &self.fusion_mlp)?;
        let res = g.add(mlp_out, sum)?;
        self.fusion_ln.apply(g, res)
    }

    /// Fusion mode: text through the text-encoder prefix, then the upper
    /// shared layers with cross-attention to the (already encoded) image
    /// states. Returns the fused token states.
    pub fn forward_fusion(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        image_states: Value,
    ) -> Result<Value> {
        let mut x = self.encode_text_prefix(g, tokens)?;
        for block in &self.shared_blocks[self.cfg.split_point..] {
            x = block.forward_cross(g, x, image_states, self.cfg.n_heads)?;
        }
        self.text_final_ln.apply(g, x)
    }

    /// Contrastive mode: both modalities encoded independently, with
    /// average-pooled features for the similarity.
    pub fn forward_contrastive(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        grid: &PatchGrid,
    ) -> Result<EncodedPair> {
        let image_states = self.encode_image(g, grid)?;
        let text_states = self.encode_text(g, tokens)?;
        let v_cls = g.select_rows(image_states, &[0])?;
        let w_cls = g.select_rows(text_states, &[0])?;
        let fusion = self.fusion_token(g, v_cls, w_cls)?;
        let pooled_v = g.mean_rows(image_states);
        let pooled_w = g.mean_rows(text_states);
        Ok(EncodedPair {
            image_states,
            text_states,
            v_cls,
            w_cls,
            fusion,
            pooled_v,
            pooled_w,
        })
    }

    /// Reconstruction mode: encode the image, replace the masked patch
    /// state rows with the fusion token, then run the upper shared layers
    /// with the image side as queries cross-attending to the text-encoder
    /// states. Returns K-way logits at the masked positions.
    pub fn forward_reconstruction(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        grid: &PatchGrid,
        mask_positions: &[usize],
    ) -> Result<ReconstructionOut> {
        if mask_positions.is_empty() {
            return Err(Error::invalid("reconstruction requires at least one masked patch"));
        }
        for &p in mask_positions {
            if p >= grid.patch_count() {
                return Err(Error::invalid(format!(
                    "mask position {p} out of range for {} patches",
                    grid.patch_count()
                )));
            }
        }
        let image_states = self.encode_image(g, grid)?;
        let text_states = self.encode_text_prefix(g, tokens)?;
        let v_cls = g.select_rows(image_states, &[0])?;
        let w_cls = g.select_rows(text_states, &[0])?;
        let fusion = self.fusion_token(g, v_cls, w_cls)?;
        // patch i sits at state row i+1 (CLS at 0)
        let rows: Vec<usize> = mask_positions.iter().map(|&p| p + 1).collect();
        let masked_states = g.replace_rows(image_states, &rows, fusion)?;
        let mut x = masked_states;
        for block in &self.shared_blocks[self.cfg.split_point..] {
            x = block.forward_cross(g, x, text_states, self.cfg.n_heads)?;
        }
        let x = self.text_final_ln.apply(g, x)?;
        let selected = g.select_rows(x, &rows)?;
        let logits = self.patch_head.apply(g, selected)?;
        Ok(ReconstructionOut {
            logits,
            masked_states,
        })
    }

    /// Parameters of the text-encoder prefix, identical objects in the
    /// contrastive and fusion paths.
    pub fn prefix_param_refs(&self) -> Vec<ParamRef> {
        self.shared_blocks[..self.cfg.split_point]
            .iter()
            .flat_map(|b| b.param_refs())
            .collect()
    }
}
