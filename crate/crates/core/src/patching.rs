//! Image tokenization: patch extraction, fixed 2-D sin-cos positions and the
//! linear patch projection.

use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var};

/// Single-channel image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGray {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageGray {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::shape("image", &[height, width], &[pixels.len()]));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(ImageGray {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

/// Positioned token sequence for one image.
#[derive(Debug, Clone, Copy)]
pub struct TokenSequence {
    pub tokens: Var,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits an image into row-major `p × p` patches, each flattened row-major.
pub fn extract_patches(img: &ImageGray, p: usize) -> Result<Tensor> {
    if p == 0 || !img.height.is_multiple_of(p) || !img.width.is_multiple_of(p) {
        return Err(Error::Config(format!(
            "patch size {p} does not divide image {}x{}",
            img.height, img.width
        )));
    }
    let (gh, gw) = (img.height / p, img.width / p);
    let mut data = Vec::with_capacity(img.pixels.len());
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..p {
                let start = (py * p + y) * img.width + px * p;
                data.extend_from_slice(&img.pixels[start..start + p]);
            }
        }
    }
    Tensor::new(&[gh * gw, p * p], data)
}

/// Inverse of [`extract_patches`].
pub fn assemble_patches(patches: &Tensor, grid_h: usize, grid_w: usize, p: usize) -> Result<ImageGray> {
    if patches.shape() != [grid_h * grid_w, p * p] {
        return Err(Error::shape("assemble_patches", patches.shape(), &[grid_h * grid_w, p * p]));
    }
    let width = grid_w * p;
    let mut pixels = vec![0.0; grid_h * p * width];
    for (i, patch) in patches.data().chunks_exact(p * p).enumerate() {
        let (py, px) = (i / grid_w, i % grid_w);
        for y in 0..p {
            let start = (py * p + y) * width + px * p;
            pixels[start..start + p].copy_from_slice(&patch[y * p..(y + 1) * p]);
        }
    }
    ImageGray::new(grid_h * p, width, pixels)
}

fn sincos_1d(pos: f64, half: usize, out: &mut [f32]) {
    for k in 0..half / 2 {
        let omega = 1.0 / 10000f64.powf(2.0 * k as f64 / half as f64);
        out[2 * k] = (pos * omega).sin() as f32;
        out[2 * k + 1] = (pos * omega).cos() as f32;
    }
}

/// Fixed 2-D factorized sin-cos embedding: the first `d/2` channels encode
/// the grid row, the last `d/2` the grid column, each as interleaved
/// `(sin, cos)` pairs at frequencies `1 / 10000^(2k / (d/2))`.
pub fn sincos_pos_embed(grid_h: usize, grid_w: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::Config(format!("embedding dim {d} must be divisible by 4")));
    }
    let half = d / 2;
    let mut data = vec![0.0; grid_h * grid_w * d];
    for (i, row) in data.chunks_exact_mut(d).enumerate() {
        let (y, x) = (i / grid_w, i % grid_w);
        let (rows, cols) = row.split_at_mut(half);
        sincos_1d(y as f64, half, rows);
        sincos_1d(x as f64, half, cols);
    }
    Tensor::new(&[grid_h * grid_w, d], data)
}

/// `tokens = patches · proj + bias + pos`.
pub fn embed_tokens(
    g: &mut Graph<'_>,
    patches: Var,
    proj: Var,
    proj_bias: Var,
    pos: Var,
) -> Result<Var> {
    let projected = g.matmul(patches, proj)?;
    let biased = g.add_row(projected, proj_bias)?;
    g.add(biased, pos)
}

/// Optional per-dataset intensity standardization applied to patch values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelNorm {
    pub mean: f32,
    pub std: f32,
}

impl Default for PixelNorm {
    fn default() -> Self {
        PixelNorm { mean: 0.0, std: 1.0 }
    }
}

impl PixelNorm {
    pub fn apply(&self, patches: &mut Tensor) {
        if *self == PixelNorm::default() {
            return;
        }
        let inv = 1.0 / self.std;
        patches.data_mut().iter_mut().for_each(|v| *v = (*v - self.mean) * inv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::finite_diff_check;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> ImageGray {
        let n = h * w;
        ImageGray::new(h, w, (0..n).map(|i| i as f32 / n as f32).collect()).unwrap()
    }

    #[test]
    fn four_by_four_into_two_by_two_patches() {
        let img = ramp(4, 4);
        let p = extract_patches(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        let expect = [img.get(0, 0), img.get(0, 1), img.get(1, 0), img.get(1, 1)];
        assert_eq!(p.row(0), &expect);
        let expect3 = [img.get(2, 2), img.get(2, 3), img.get(3, 2), img.get(3, 3)];
        assert_eq!(p.row(3), &expect3);
    }

    #[test]
    fn whole_image_patch() {
        let img = ramp(4, 4);
        let p = extract_patches(&img, 4).unwrap();
        assert_eq!(p.shape(), &[1, 16]);
        assert_eq!(p.data(), img.pixels());
    }

    #[test]
    fn non_divisible_patch_is_config_error() {
        assert!(matches!(extract_patches(&ramp(6, 6), 4), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(ImageGray::new(1, 2, vec![0.5, 1.5]).is_err());
    }

    proptest! {
        #[test]
        fn reassembly_is_exact(pixels in prop::collection::vec(0.0f32..=1.0, 64)) {
            let img = ImageGray::new(8, 8, pixels).unwrap();
            for p in [1, 2, 4, 8] {
                let patches = extract_patches(&img, p).unwrap();
                let back = assemble_patches(&patches, 8 / p, 8 / p, p).unwrap();
                prop_assert_eq!(&back, &img);
            }
        }
    }

    #[test]
    fn origin_embedding_is_sin_zero_cos_one() {
        let pos = sincos_pos_embed(4, 4, 16).unwrap();
        for (c, v) in pos.row(0).iter().enumerate() {
            assert_eq!(*v, if c % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn distinct_positions_have_distinct_embeddings() {
        let pos = sincos_pos_embed(8, 8, 16).unwrap();
        for i in 0..64 {
            for j in i + 1..64 {
                assert_ne!(pos.row(i), pos.row(j), "positions {i} and {j} collide");
            }
        }
    }

    #[test]
    fn transposed_positions_swap_halves() {
        let pos = sincos_pos_embed(4, 4, 16).unwrap();
        let a = pos.row(2 * 4 + 3);
        let b = pos.row(3 * 4 + 2);
        assert_eq!(&a[..8], &b[8..]);
        assert_eq!(&a[8..], &b[..8]);
    }

    #[test]
    fn dim_must_be_divisible_by_four() {
        assert!(sincos_pos_embed(2, 2, 6).is_err());
    }

    #[test]
    fn zero_projection_yields_positions() {
        let patches = extract_patches(&ramp(4, 4), 2).unwrap();
        let pos = sincos_pos_embed(2, 2, 8).unwrap();
        let mut g = Graph::new();
        let vp = g.constant_ref(&patches);
        let proj = g.constant(Tensor::zeros(&[4, 8]));
        let bias = g.constant(Tensor::zeros(&[8]));
        let vpos = g.constant_ref(&pos);
        let t = embed_tokens(&mut g, vp, proj, bias, vpos).unwrap();
        assert_eq!(g.value(t).data(), pos.data());
    }

    #[test]
    fn selecting_patches_pick_projection_rows() {
        // identity patches: token i = proj row i + bias
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        let proj = Tensor::new(&[4, 8], (0..32).map(|i| i as f32 * 0.1).collect()).unwrap();
        let bias = Tensor::full(&[8], 0.5);
        let mut g = Graph::new();
        let (vp, vw, vb) = (g.constant_ref(&eye), g.constant_ref(&proj), g.constant_ref(&bias));
        let vpos = g.constant(Tensor::zeros(&[4, 8]));
        let t = embed_tokens(&mut g, vp, vw, vb, vpos).unwrap();
        for i in 0..4 {
            let expect: Vec<f32> = proj.row(i).iter().map(|v| v + 0.5).collect();
            assert_eq!(g.value(t).row(i), expect.as_slice());
        }
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let patches = extract_patches(&ramp(4, 4), 2).unwrap();
        let pos = sincos_pos_embed(2, 2, 8).unwrap();
        let proj = Tensor::new(&[4, 8], (0..32).map(|i| ((i * 7 % 11) as f32 - 5.0) * 0.05).collect()).unwrap();
        let bias = Tensor::full(&[8], 0.1);
        let report = finite_diff_check(
            |p| {
                let mut g = Graph::new();
                let vp = g.constant_ref(&patches);
                let (vw, vb) = (g.param(&p[0], 0), g.param(&p[1], 1));
                let vpos = g.constant_ref(&pos);
                let t = embed_tokens(&mut g, vp, vw, vb, vpos)?;
                let sq = g.mul(t, t)?;
                let loss = g.sum(sq)?;
                let v = f64::from(g.value(loss).item());
                Ok((v, g.backward(loss)?))
            },
            &[proj, bias],
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn embedding_is_linear_in_patch_values() {
        let patches = extract_patches(&ramp(4, 4), 2).unwrap();
        let scaled = Tensor::new(patches.shape(), patches.data().iter().map(|v| v * 3.0).collect()).unwrap();
        let pos = sincos_pos_embed(2, 2, 8).unwrap();
        let proj = Tensor::new(&[4, 8], (0..32).map(|i| (i as f32).sin()).collect()).unwrap();
        let zero_bias = Tensor::zeros(&[8]);
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let (vx, vw, vb, vp) = (
                g.constant_ref(x),
                g.constant_ref(&proj),
                g.constant_ref(&zero_bias),
                g.constant_ref(&pos),
            );
            let t = embed_tokens(&mut g, vx, vw, vb, vp).unwrap();
            g.value(t).data().iter().zip(pos.data()).map(|(a, b)| a - b).collect::<Vec<f32>>()
        };
        for (a, b) in run(&scaled).iter().zip(run(&patches)) {
            assert!((a - 3.0 * b).abs() < 1e-5);
        }
    }

    #[test]
    fn pixel_norm_standardizes() {
        let mut t = Tensor::new(&[1, 2], vec![0.5, 1.0]).unwrap();
        PixelNorm { mean: 0.5, std: 0.25 }.apply(&mut t);
        assert_eq!(t.data(), &[0.0, 2.0]);
    }
}
