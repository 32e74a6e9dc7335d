//! Images, patch tokens, masking, position codes and per-patch target
//! normalization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// RGB image, row-major HWC, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageRgb {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::dim(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(ImageRgb { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        ImageRgb { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        ImageRgb { height, width, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<ImageRgb> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::dim(format!(
                "crop {h}x{w} at ({y0},{x0}) outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(ImageRgb::from_fn(h, w, |y, x| self.pixel(y0 + y, x0 + x)))
    }
}

/// Tokens of a `rows × cols` patch grid, one row per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet<T: Real = f32> {
    pub tokens: Tensor<T>,
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
}

impl<T: Real> PatchSet<T> {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token_len(&self) -> usize {
        self.patch * self.patch * 3
    }
}

/// Splits an HWC buffer into `P×P` blocks, each flattened y, then x, then c.
pub fn patchify_hwc<T: Real>(data: &[T], h: usize, w: usize, c: usize, p: usize) -> Result<Tensor<T>> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::dim(format!("{h}x{w} is not divisible by patch size {p}")));
    }
    if data.len() != h * w * c {
        return Err(Error::dim(format!("buffer of {} values for {h}x{w}x{c}", data.len())));
    }
    let (rows, cols) = (h / p, w / p);
    let tl = p * p * c;
    let mut out = Vec::with_capacity(rows * cols * tl);
    for gy in 0..rows {
        for gx in 0..cols {
            for py in 0..p {
                let start = ((gy * p + py) * w + gx * p) * c;
                out.extend_from_slice(&data[start..start + p * c]);
            }
        }
    }
    Tensor::new(vec![rows * cols, tl], out)
}

/// Inverse of [`patchify_hwc`].
pub fn unpatchify_hwc<T: Real>(tokens: &Tensor<T>, rows: usize, cols: usize, p: usize, c: usize) -> Result<Vec<T>> {
    if tokens.shape() != [rows * cols, p * p * c] {
        return Err(Error::dim(format!(
            "tokens {:?} do not fit a {rows}x{cols} grid of {p}x{p}x{c} patches",
            tokens.shape()
        )));
    }
    let w = cols * p;
    let mut out = vec![T::zero(); rows * p * w * c];
    for gy in 0..rows {
        for gx in 0..cols {
            let tok = tokens.row(gy * cols + gx);
            for py in 0..p {
                let start = ((gy * p + py) * w + gx * p) * c;
                out[start..start + p * c].copy_from_slice(&tok[py * p * c..(py + 1) * p * c]);
            }
        }
    }
    Ok(out)
}

pub fn patchify(img: &ImageRgb, p: usize) -> Result<PatchSet> {
    let tokens = patchify_hwc(&img.data, img.height, img.width, 3, p)?;
    Ok(PatchSet {
        tokens,
        rows: img.height / p,
        cols: img.width / p,
        patch: p,
    })
}

pub fn unpatchify(ps: &PatchSet) -> Result<ImageRgb> {
    let data = unpatchify_hwc(&ps.tokens, ps.rows, ps.cols, ps.patch, 3)?;
    ImageRgb::new(ps.rows * ps.patch, ps.cols * ps.patch, data)
}

/// Per-token mask over the first view; `true` means hidden.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub mask: Vec<bool>,
    pub ratio: f64,
}

impl MaskSpec {
    pub fn none(n: usize) -> Self {
        MaskSpec {
            mask: vec![false; n],
            ratio: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn num_masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn num_visible(&self) -> usize {
        self.len() - self.num_masked()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.mask[i]).collect()
    }
}

/// `⌊r·n⌋`, tolerant to products like `0.7·10 = 6.999…`.
pub fn masked_count(n: usize, r: f64) -> usize {
    ((r * n as f64) + 1e-9).floor() as usize
}

pub fn sample_mask(n: usize, r: f64, seed: u64) -> Result<MaskSpec> {
    sample_mask_with(n, r, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Partial Fisher–Yates: the first `⌊r·n⌋` slots of a shuffled index list are masked.
pub fn sample_mask_with<R: Rng>(n: usize, r: f64, rng: &mut R) -> Result<MaskSpec> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::config(format!("masking ratio must lie in [0, 1], got {r}")));
    }
    let k = masked_count(n, r).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut mask = vec![false; n];
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
        mask[idx[i]] = true;
    }
    Ok(MaskSpec { mask, ratio: r })
}

/// Fixed 2D sine-cosine code: the first `d/2` dims encode the column, the
/// last `d/2` the row, each as `(sin pω₀, cos pω₀, sin pω₁, …)` with
/// `ω_i = 10000^(−i/(d/4))`.
pub fn pos_embed_2d<T: Real>(rows: usize, cols: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::config(format!(
            "position code width must be a positive multiple of 4, got {d}"
        )));
    }
    let quarter = d / 4;
    let freqs: Vec<f64> = (0..quarter)
        .map(|i| 10000f64.powf(-(i as f64) / quarter as f64))
        .collect();
    let mut out = Vec::with_capacity(rows * cols * d);
    for y in 0..rows {
        for x in 0..cols {
            for pos in [x as f64, y as f64] {
                for &w in &freqs {
                    let a = pos * w;
                    out.push(T::lit(a.sin()));
                    out.push(T::lit(a.cos()));
                }
            }
        }
    }
    Tensor::new(vec![rows * cols, d], out)
}

/// Mean and population standard deviation of one token.
pub fn token_stats<T: Real>(tok: &[T]) -> (f64, f64) {
    let n = tok.len().max(1) as f64;
    let mean = tok.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = tok.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn normalize_tokens<T: Real>(tokens: &Tensor<T>, eps: f64) -> Tensor<T> {
    let (n, _) = tokens.dims2();
    let mut out = tokens.clone();
    for i in 0..n {
        let (mean, std) = token_stats(tokens.row(i));
        let denom = std + eps;
        for v in out.row_mut(i) {
            *v = T::lit((v.as_f64() - mean) / denom);
        }
    }
    out
}

pub fn normalize_targets<T: Real>(ps: &PatchSet<T>, eps: f64) -> PatchSet<T> {
    PatchSet {
        tokens: normalize_tokens(&ps.tokens, eps),
        ..ps.clone()
    }
}

/// Maps normalized predictions back to pixels with the target's per-patch
/// statistics.
pub fn unnormalize_tokens<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let (n, _) = pred.dims2();
    let mut out = pred.clone();
    for i in 0..n {
        let (mean, std) = token_stats(target.row(i));
        for v in out.row_mut(i) {
            *v = T::lit(v.as_f64() * (std + eps) + mean);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    fn random_image(h: usize, w: usize, seed: u64) -> ImageRgb {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageRgb::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn default_grid_dimensions() {
        let ps = patchify(&random_image(224, 224, 0), 16).unwrap();
        assert_eq!(ps.tokens.shape(), &[196, 768]);
        assert_eq!((ps.rows, ps.cols), (14, 14));
    }

    #[test]
    fn single_patch_is_flattened_image() {
        let img = random_image(16, 16, 1);
        let ps = patchify(&img, 16).unwrap();
        assert_eq!(ps.tokens.data(), &img.data[..]);
    }

    #[test]
    fn constant_image_gives_identical_tokens() {
        let ps = patchify(&ImageRgb::filled(32, 48, [0.2, 0.4, 0.6]), 8).unwrap();
        for i in 1..ps.len() {
            assert_eq!(ps.tokens.row(i), ps.tokens.row(0));
        }
    }

    #[test]
    fn non_divisible_rejected() {
        assert!(matches!(
            patchify(&ImageRgb::filled(20, 16, [0.0; 3]), 16),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn token_layout_is_y_then_x_then_c() {
        let img = random_image(8, 12, 2);
        let ps = patchify(&img, 4).unwrap();
        // token (gy=1, gx=2), in-patch (py=3, px=1), channel 2
        let tok = ps.tokens.row(ps.cols + 2);
        assert_eq!(tok[(3 * 4 + 1) * 3 + 2], img.pixel(4 + 3, 8 + 1)[2]);
    }

    #[test]
    fn single_token_unpatchifies_to_patch() {
        let ps = PatchSet {
            tokens: Tensor::from_fn(vec![1, 48], |i| i as f32),
            rows: 1,
            cols: 1,
            patch: 4,
        };
        let img = unpatchify(&ps).unwrap();
        assert_eq!((img.height, img.width), (4, 4));
    }

    #[test]
    fn swapping_tokens_swaps_blocks() {
        let img = random_image(8, 16, 3);
        let mut ps = patchify(&img, 8).unwrap();
        let (a, b) = (ps.tokens.row(0).to_vec(), ps.tokens.row(1).to_vec());
        ps.tokens.row_mut(0).copy_from_slice(&b);
        ps.tokens.row_mut(1).copy_from_slice(&a);
        let out = unpatchify(&ps).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(out.pixel(y, x), img.pixel(y, x + 8));
                assert_eq!(out.pixel(y, x + 8), img.pixel(y, x));
            }
        }
    }

    #[test]
    fn mask_counts() {
        let m = sample_mask(196, 0.9, 0).unwrap();
        assert_eq!((m.num_masked(), m.num_visible()), (176, 20));
        assert_eq!(sample_mask(196, 0.0, 0).unwrap().num_masked(), 0);
        assert_eq!(sample_mask(196, 1.0, 0).unwrap().num_visible(), 0);
        assert!(matches!(sample_mask(10, 1.5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn mask_is_seeded() {
        assert_eq!(sample_mask(50, 0.5, 9).unwrap(), sample_mask(50, 0.5, 9).unwrap());
        assert_ne!(sample_mask(50, 0.5, 9).unwrap(), sample_mask(50, 0.5, 10).unwrap());
    }

    #[test]
    fn mask_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 10];
        let draws = 100_000;
        for _ in 0..draws {
            let m = sample_mask_with(10, 0.5, &mut rng).unwrap();
            for (c, &b) in counts.iter_mut().zip(&m.mask) {
                *c += b as usize;
            }
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.5).abs() <= 0.01);
        }
    }

    #[test]
    fn position_zero_code() {
        let pe = pos_embed_2d::<f64>(1, 1, 8).unwrap();
        assert_eq!(pe.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn position_codes_are_distinct_and_bounded() {
        let pe = pos_embed_2d::<f64>(14, 14, 768).unwrap();
        assert_eq!(pe.shape(), &[196, 768]);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        for i in 0..196 {
            for j in i + 1..196 {
                assert!(pe.row(i) != pe.row(j), "{i} vs {j}");
            }
        }
    }

    #[test]
    fn position_code_layout() {
        let pe = pos_embed_2d::<f64>(3, 5, 8).unwrap();
        // token (y=2, x=3): column half uses x, row half uses y
        let row = pe.row(2 * 5 + 3);
        assert_eq!(row[0], 3f64.sin());
        assert_eq!(row[3], (3.0 * 0.01f64).cos());
        assert_eq!(row[4], 2f64.sin());
        assert!(matches!(pos_embed_2d::<f32>(2, 2, 6), Err(Error::Config(_))));
    }

    #[test]
    fn constant_patch_normalizes_to_zero() {
        let ps = patchify(&ImageRgb::filled(8, 8, [0.5; 3]), 8).unwrap();
        let n = normalize_targets(&ps, 1e-6);
        assert!(n.tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_token_statistics_and_idempotence() {
        let ps = patchify(&random_image(16, 16, 5), 8).unwrap();
        let once = normalize_targets(&ps, 1e-6);
        for i in 0..once.len() {
            let (m, s) = token_stats(once.tokens.row(i));
            assert!(m.abs() <= 1e-6);
            assert!((s - 1.0).abs() <= 1e-3);
        }
        let twice = normalize_targets(&once, 1e-6);
        assert!(twice.tokens.max_abs_diff(&once.tokens) <= 1e-4);
    }

    #[test]
    fn unnormalize_inverts_normalize() {
        let ps = patchify(&random_image(16, 16, 6), 8).unwrap();
        let n = normalize_targets(&ps, 1e-6);
        let back = unnormalize_tokens(&n.tokens, &ps.tokens, 1e-6).unwrap();
        assert!(back.max_abs_diff(&ps.tokens) <= 1e-5);
    }

    proptest! {
        #[test]
        fn patchify_round_trip(rows in 1usize..5, cols in 1usize..5, p in 1usize..6, seed in any::<u64>()) {
            let img = random_image(rows * p, cols * p, seed);
            let back = unpatchify(&patchify(&img, p).unwrap()).unwrap();
            prop_assert_eq!(back, img);
        }

        #[test]
        fn mask_count_is_floor(n in 0usize..300, r in 0.0f64..=1.0, seed in any::<u64>()) {
            let m = sample_mask(n, r, seed).unwrap();
            prop_assert_eq!(m.num_masked(), masked_count(n, r));
            prop_assert_eq!(m.len(), n);
        }

        #[test]
        fn position_codes_in_unit_range(rows in 1usize..8, cols in 1usize..8, q in 1usize..16) {
            let pe = pos_embed_2d::<f64>(rows, cols, 4 * q).unwrap();
            prop_assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        }
    }
}
