//! The radiograph transformer: patch grid extraction, position-concatenated
//! embedding, a stack of pre-LN self-attention blocks gathered by an
//! aggregation token, the recurrent-concatenation readout, and the CAM hook.

use rand::Rng;

use crate::data::GrayImage;
use crate::error::{Error, Result};
use crate::nn::{Embedding, Linear, Param, TransformerBlock};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    /// Width of the concatenated position feature.
    pub pos_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    /// Recurrent concatenation readout; disabled it degrades to the plain
    /// class-token readout.
    pub rec_concat: bool,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            image_size: 224,
            patch_size: 16,
            dim: 128,
            pos_dim: 32,
            heads: 4,
            blocks: 12,
            mlp_ratio: 4,
            rec_concat: true,
        }
    }
}

impl VisionConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Flattened patch grid: row `i·g + j` is cell `(i, j)`, row-major inside the
/// cell, intensities straight from the image.
pub struct PatchGrid<E: Scalar> {
    pub patches: Tensor<E>,
    pub grid: usize,
    pub patch_size: usize,
}

/// Cut a square image into non-overlapping cells and flatten each cell.
pub fn patchify<E: Scalar>(image: &GrayImage, cfg: &VisionConfig) -> Result<PatchGrid<E>> {
    if image.size != cfg.image_size {
        return Err(Error::Data(format!(
            "expected a {0}x{0} image, got {1}x{1}",
            cfg.image_size, image.size
        )));
    }
    let g = cfg.grid();
    let p = cfg.patch_size;
    let mut data = Vec::with_capacity(cfg.n_patches() * cfg.patch_dim());
    for gi in 0..g {
        for gj in 0..g {
            for py in 0..p {
                let y = gi * p + py;
                let x0 = gj * p;
                for px in 0..p {
                    data.push(E::from_f64(image.pixels[y * image.size + x0 + px] as f64));
                }
            }
        }
    }
    Ok(PatchGrid {
        patches: Tensor::from_vec(&[cfg.n_patches(), cfg.patch_dim()], data)?,
        grid: g,
        patch_size: p,
    })
}

/// Multi-view radiograph encoder with an aggregation token at index 0.
pub struct RadiographEncoder<E: Scalar> {
    pub cfg: VisionConfig,
    pub patch_embed: Linear<E>,
    pub pos_embed: Embedding<E>,
    pub fuse_proj: Linear<E>,
    /// Aggregation embedding, initialized to all zeros.
    pub agg: Tensor<E>,
    pub blocks: Vec<TransformerBlock<E>>,
    pub readout: Linear<E>,
}

impl<E: Scalar> RadiographEncoder<E> {
    pub fn new(cfg: &VisionConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.blocks)
            .map(|_| TransformerBlock::new(cfg.dim, cfg.heads, cfg.mlp_ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        let readout_in = if cfg.rec_concat { 2 * cfg.dim } else { cfg.dim };
        Ok(RadiographEncoder {
            cfg: cfg.clone(),
            patch_embed: Linear::new(cfg.patch_dim(), cfg.dim, rng),
            pos_embed: Embedding::new(cfg.n_patches() + 1, cfg.pos_dim, rng),
            fuse_proj: Linear::new(cfg.dim + cfg.pos_dim, cfg.dim, rng),
            agg: Tensor::zeros_var(&[cfg.dim]),
            blocks,
            readout: Linear::new(readout_in, cfg.dim, rng),
        })
    }

    /// Token matrix `[(n+1)×d]`: row 0 carries the aggregation embedding, the
    /// rest the patch embeddings, each concatenated with its position feature
    /// and re-projected to the model width.
    pub fn embed(&self, grid: &PatchGrid<E>) -> Result<Tensor<E>> {
        let n = grid.patches.shape()[0];
        let patch_features = self.patch_embed.forward(&grid.patches)?;
        let agg_row = self.agg.reshape(&[1, self.cfg.dim])?;
        let tokens = Tensor::concat(&[agg_row, patch_features], 0)?;
        let positions: Vec<usize> = (0..=n).collect();
        let pos = self.pos_embed.lookup(&positions)?;
        let fused = Tensor::concat(&[tokens, pos], 1)?;
        self.fuse_proj.forward(&fused)
    }

    /// Run the block stack and split the aggregation feature from the patch
    /// features.
    pub fn encode_grid(&self, grid: &PatchGrid<E>) -> Result<(Tensor<E>, Tensor<E>)> {
        let mut x = self.embed(grid)?;
        for block in &self.blocks {
            x = block.forward(&x, false)?;
        }
        let n = grid.patches.shape()[0];
        let agg_feat = x.narrow(0, 0, 1)?.reshape(&[self.cfg.dim])?;
        let patch_feats = x.narrow(0, 1, n)?;
        Ok((patch_feats, agg_feat))
    }

    /// `encode` on a raw image: patchify then [`Self::encode_grid`].
    pub fn encode(&self, image: &GrayImage) -> Result<(Tensor<E>, Tensor<E>)> {
        self.encode_grid(&patchify(image, &self.cfg)?)
    }

    /// Recurrent-concatenation readout: pair every patch feature with the
    /// aggregation feature, mean-pool the pairs, and project to the final
    /// image feature. With `rec_concat` off the aggregation feature alone is
    /// projected (single-concatenation readout).
    pub fn image_feature(&self, patch_feats: &Tensor<E>, agg_feat: &Tensor<E>) -> Result<Tensor<E>> {
        if self.cfg.rec_concat {
            let n = patch_feats.shape()[0];
            let agg_rows = agg_feat.repeat_rows(n)?;
            let pairs = Tensor::concat(&[patch_feats.clone(), agg_rows], 1)?;
            let pooled = pairs.mean_axis(0)?;
            self.readout.forward_vec(&pooled)
        } else {
            self.readout.forward_vec(agg_feat)
        }
    }

    /// Full forward pass for one view.
    pub fn forward(&self, image: &GrayImage) -> Result<Tensor<E>> {
        let (patch_feats, agg_feat) = self.encode(image)?;
        self.image_feature(&patch_feats, &agg_feat)
    }

    /// Class activation map: per-patch classifier evidence, min-max
    /// normalized over the grid and bilinearly upsampled to the image size.
    /// A constant score map normalizes to all zeros.
    pub fn cam(&self, image: &GrayImage, class_weight: &Tensor<E>) -> Result<GrayImage> {
        if !self.cfg.rec_concat {
            return Err(Error::Contract(
                "CAM needs the recurrent-concatenation readout".to_string(),
            ));
        }
        if class_weight.shape() != [self.cfg.dim] {
            return Err(Error::Shape(format!(
                "class weight must be [{}], got {:?}",
                self.cfg.dim,
                class_weight.shape()
            )));
        }
        let (patch_feats, agg_feat) = self.encode(image)?;
        let n = patch_feats.shape()[0];
        let agg_rows = agg_feat.repeat_rows(n)?;
        let pairs = Tensor::concat(&[patch_feats, agg_rows], 1)?;
        let per_patch = self.readout.forward(&pairs)?; // [n×d]
        let w = class_weight.reshape(&[self.cfg.dim, 1])?;
        let scores = per_patch.matmul(&w)?; // [n×1]
        let raw: Vec<f64> = scores.to_vec().iter().map(|&v| Scalar::to_f64(v)).collect();

        let g = self.cfg.grid();
        let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let cell: Vec<f32> = if hi - lo < 1e-12 {
            vec![0.0; n]
        } else {
            raw.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect()
        };
        Ok(upsample_bilinear(&cell, g, self.cfg.image_size))
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<Param<E>>) {
        self.patch_embed.params(&format!("{prefix}.patch_embed"), out);
        self.pos_embed.params(&format!("{prefix}.pos_embed"), out);
        self.fuse_proj.params(&format!("{prefix}.fuse_proj"), out);
        out.push(Param::new(format!("{prefix}.agg"), self.agg.clone(), false));
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&format!("{prefix}.blocks.{i}"), out);
        }
        self.readout.params(&format!("{prefix}.readout"), out);
    }

    pub fn param_count(&self) -> usize {
        let mut params = Vec::new();
        self.params("e", &mut params);
        params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Test hook: zero the aggregation token, position table, block weights
    /// and projection biases so the encoder becomes a linear function of the
    /// patch embedding.
    pub fn strip_to_linear(&self) {
        self.agg.apply_update(|d| d.fill(E::zero()));
        self.pos_embed.table.apply_update(|d| d.fill(E::zero()));
        for b in &self.blocks {
            b.zero_weights();
        }
        for layer in [&self.patch_embed, &self.fuse_proj, &self.readout] {
            if let Some(b) = &layer.bias {
                b.apply_update(|d| d.fill(E::zero()));
            }
        }
    }
}

/// Bilinear upsampling of a `g×g` cell map to `size×size` pixels.
fn upsample_bilinear(cells: &[f32], g: usize, size: usize) -> GrayImage {
    let mut out = GrayImage::new(size);
    let scale = g as f64 / size as f64;
    for y in 0..size {
        for x in 0..size {
            let cx = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (g - 1) as f64);
            let cy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, (g - 1) as f64);
            let x0 = cx.floor() as usize;
            let y0 = cy.floor() as usize;
            let x1 = (x0 + 1).min(g - 1);
            let y1 = (y0 + 1).min(g - 1);
            let fx = (cx - x0 as f64) as f32;
            let fy = (cy - y0 as f64) as f32;
            let top = cells[y0 * g + x0] * (1.0 - fx) + cells[y0 * g + x1] * fx;
            let bot = cells[y1 * g + x0] * (1.0 - fx) + cells[y1 * g + x1] * fx;
            out.pixels[y * size + x] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::trunc_normal;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> VisionConfig {
        VisionConfig {
            image_size: 32,
            patch_size: 16,
            dim: 8,
            pos_dim: 2,
            heads: 2,
            blocks: 2,
            mlp_ratio: 2,
            rec_concat: true,
        }
    }

    fn test_image(size: usize, f: impl Fn(usize, usize) -> f32) -> GrayImage {
        let mut img = GrayImage::new(size);
        for y in 0..size {
            for x in 0..size {
                img.pixels[y * size + x] = f(x, y);
            }
        }
        img
    }

    #[test]
    fn default_config_matches_flagship_geometry() {
        let cfg = VisionConfig::default();
        assert_eq!(cfg.grid(), 14);
        assert_eq!(cfg.n_patches(), 196);
        assert_eq!(cfg.patch_dim(), 256);
        assert_eq!(cfg.blocks, 12);
    }

    #[test]
    fn patchify_layout_and_size_checks() {
        let cfg = VisionConfig::default();
        let img = test_image(224, |x, y| ((x + y) % 7) as f32 / 7.0);
        let grid = patchify::<f64>(&img, &cfg).unwrap();
        assert_eq!(grid.patches.shape(), &[196, 256]);

        // row i*14+j holds cell (i,j), row-major within the cell
        let v = grid.patches.to_vec();
        let (gi, gj, py, px) = (3usize, 5usize, 7usize, 11usize);
        let row = gi * 14 + gj;
        let expected = img.get(gj * 16 + px, gi * 16 + py) as f64;
        assert_eq!(v[row * 256 + py * 16 + px], expected);

        let wrong = test_image(100, |_, _| 0.0);
        assert!(patchify::<f64>(&wrong, &cfg).is_err());
    }

    #[test]
    fn patchify_constant_image_gives_constant_patches() {
        let cfg = toy_cfg();
        let img = test_image(32, |_, _| 0.375);
        let grid = patchify::<f64>(&img, &cfg).unwrap();
        assert!(grid.patches.to_vec().iter().all(|&v| (v - 0.375f64).abs() < 1e-7));
    }

    #[test]
    fn single_bright_pixel_touches_only_patch_zero() {
        let cfg = toy_cfg();
        let black = test_image(32, |_, _| 0.0);
        let dot = test_image(32, |x, y| if x == 0 && y == 0 { 1.0 } else { 0.0 });
        let a = patchify::<f64>(&black, &cfg).unwrap().patches.to_vec();
        let b = patchify::<f64>(&dot, &cfg).unwrap().patches.to_vec();
        let pd = cfg.patch_dim();
        assert_ne!(a[..pd], b[..pd]);
        assert_eq!(a[pd..], b[pd..]);
    }

    #[test]
    fn embed_is_position_sensitive_and_shaped() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = RadiographEncoder::<f64>::new(&cfg, &mut rng).unwrap();
        // identical patches at different positions embed differently
        let img = test_image(32, |_, _| 0.5);
        let grid = patchify::<f64>(&img, &cfg).unwrap();
        let embedded = enc.embed(&grid).unwrap();
        assert_eq!(embedded.shape(), &[5, 8]);
        let v = embedded.to_vec();
        assert_ne!(v[8..16], v[16..24], "patch rows 1 and 2 embed identically");
    }

    #[test]
    fn zeroed_projections_embed_zero_rows() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = RadiographEncoder::<f64>::new(&cfg, &mut rng).unwrap();
        enc.strip_to_linear();
        enc.patch_embed.weight.apply_update(|d| d.fill(0.0));
        let img = test_image(32, |_, _| 0.0);
        let embedded = enc.embed(&patchify(&img, &cfg).unwrap()).unwrap();
        assert!(embedded.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_is_deterministic_and_zero_blocks_reduce_to_embed() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = RadiographEncoder::<f64>::new(&cfg, &mut rng).unwrap();
        let img = test_image(32, |x, y| ((x * 3 + y) % 11) as f32 / 11.0);
        let (p1, a1) = enc.encode(&img).unwrap();
        let (p2, a2) = enc.encode(&img).unwrap();
        assert_eq!(p1.to_vec(), p2.to_vec());
        assert_eq!(a1.to_vec(), a2.to_vec());
        assert_eq!(p1.shape(), &[4, 8]);
        assert_eq!(a1.shape(), &[8]);

        for b in &enc.blocks {
            b.zero_weights();
        }
        let (p3, a3) = enc.encode(&img).unwrap();
        let embedded = enc.embed(&patchify(&img, &cfg).unwrap()).unwrap();
        let ev = embedded.to_vec();
        assert_eq!(a3.to_vec(), ev[..8]);
        assert_eq!(p3.to_vec(), ev[8..]);
    }

    #[test]
    fn readout_collapse_to_mean_patch_feature() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = RadiographEncoder::<f64>::new(&cfg, &mut rng).unwrap();
        // readout = [I; 0] with zero bias selects the mean patch feature
        let d = cfg.dim;
        let mut w = vec![0.0f64; 2 * d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        enc.readout.weight.set_data(&w).unwrap();
        enc.readout.bias.as_ref().unwrap().apply_update(|b| b.fill(0.0));

        let patch_feats = trunc_normal::<f64>(&[4, d], 1.0, &mut rng).detach();
        let agg = Tensor::zeros(&[d]);
        let feat = enc.image_feature(&patch_feats, &agg).unwrap();
        let mean = patch_feats.mean_axis(0).unwrap();
        for (a, b) in feat.to_vec().iter().zip(mean.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn readout_is_permutation_invariant() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = RadiographEncoder::<f64>::new(&cfg, &mut rng).unwrap();
        let patch_feats = trunc_normal::<f64>(&[4, 8], 1.0, &mut rng).detach();
        let agg = trunc_normal::<f64>(&[8], 1.0, &mut rng).detach();
        let a = enc.image_feature(&patch_feats, &agg).unwrap();
        let permuted = patch_feats.gather_rows(&[2, 0, 3, 1]).unwrap();
        let b = enc.image_feature(&permuted, &agg).unwrap();
        for (x, y) in a.to_vec().iter().zip(b.to_vec()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ablation_changes_readout_parameter_count_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let full = RadiographEncoder::<f64>::new(&toy_cfg(), &mut rng).unwrap();
        let mut cfg = toy_cfg();
        cfg.rec_concat = false;
        let ablated = RadiographEncoder::<f64>::new(&cfg, &mut rng).unwrap();
        let d = cfg.dim;
        assert_eq!(full.readout.weight.numel(), 2 * d * d);
        assert_eq!(ablated.readout.weight.numel(), d * d);
        assert_eq!(full.param_count() - ablated.param_count(), d * d);
    }

    #[test]
    fn linear_stripped_encoder_matches_hand_computed_map() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc = RadiographEncoder::<f64>::new(&cfg, &mut rng).unwrap();
        enc.strip_to_linear();
        // fuse projection selects the first d of (d + pos) exactly
        let d = cfg.dim;
        let mut fuse = vec![0.0f64; (d + cfg.pos_dim) * d];
        for i in 0..d {
            fuse[i * d + i] = 1.0;
        }
        enc.fuse_proj.weight.set_data(&fuse).unwrap();

        let img = test_image(32, |x, y| ((x * 7 + y * 3) % 13) as f32 / 13.0);
        let feat = enc.forward(&img).unwrap().to_vec();

        // hand-computed: mean over patches of (patch · Wp), through the top
        // half of the readout matrix
        let grid = patchify::<f64>(&img, &cfg).unwrap();
        let patches = grid.patches.to_vec();
        let wp = enc.patch_embed.weight.to_vec();
        let wr = enc.readout.weight.to_vec(); // [2d×d]
        let pd = cfg.patch_dim();
        let n = cfg.n_patches();
        let mut mean_embed = vec![0.0f64; d];
        for r in 0..n {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..pd {
                    acc += patches[r * pd + k] * wp[k * d + j];
                }
                mean_embed[j] += acc / n as f64;
            }
        }
        let mut expected = vec![0.0f64; d];
        for j in 0..d {
            for k in 0..d {
                expected[j] += mean_embed[k] * wr[k * d + j];
            }
        }
        for (a, b) in feat.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn encode_gradients_match_finite_differences() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let enc = RadiographEncoder::<f64>::new(&cfg, &mut rng).unwrap();
        let img = test_image(32, |x, y| ((x + 2 * y) % 9) as f32 / 9.0);
        let grid = patchify::<f64>(&img, &cfg).unwrap();
        let probe = Tensor::var_from_vec(grid.patches.shape(), grid.patches.to_vec()).unwrap();
        let weights = trunc_normal::<f64>(&[8], 1.0, &mut rng).detach();
        let err = grad_check(
            |ins| {
                let pg = PatchGrid { patches: ins[0].clone(), grid: 2, patch_size: 16 };
                let (p, a) = enc.encode_grid(&pg)?;
                Ok(enc.image_feature(&p, &a)?.mul(&weights)?.sum())
            },
            &[probe],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn cam_zero_weight_gives_all_zero_map() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = RadiographEncoder::<f64>::new(&cfg, &mut rng).unwrap();
        let img = test_image(32, |x, _| (x % 5) as f32 / 5.0);
        let map = enc.cam(&img, &Tensor::zeros(&[8])).unwrap();
        assert_eq!(map.size, 32);
        assert!(map.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cam_map_is_in_unit_range_and_scale_invariant() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let enc = RadiographEncoder::<f64>::new(&cfg, &mut rng).unwrap();
        let img = test_image(32, |x, y| ((x ^ y) % 8) as f32 / 8.0);
        let w = trunc_normal::<f64>(&[8], 1.0, &mut rng).detach();
        let a = enc.cam(&img, &w).unwrap();
        assert!(a.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));

        let scaled = w.scale(3.7).detach();
        let b = enc.cam(&img, &scaled).unwrap();
        let argmax = |m: &GrayImage| {
            m.pixels
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(argmax(&a), argmax(&b));
        for (x, y) in a.pixels.iter().zip(&b.pixels) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
