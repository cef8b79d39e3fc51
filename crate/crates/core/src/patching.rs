//! Patch-based counterfactual fusion.
//!
//! An image is cut into its four quadrants, each resized back to full
//! resolution. Per class, the patches get softmax weights over the patch
//! axis (temperature `tau`), the patch logits are averaged with those
//! weights, and the result is added to the image logit with coefficient
//! `lambda` before the sigmoid:
//!
//! ```text
//! w_jk  = exp(s_jk / tau) / sum_l exp(s_lk / tau)
//! q_k   = sum_j w_jk * q_jk
//! tde_k = sigmoid(p_k + lambda * q_k)
//! ```
//!
//! Fusion happens on logits, never on probabilities.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{shape_err, Error, Result};
use crate::losses::sigmoid;
use crate::numcore::{HeadRole, ModelParams};

/// Number of patches; always the four quadrants.
pub const PATCHES: usize = 4;

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Source index and fraction for each output position, corner aligned:
/// output `0` maps to input `0` and output `n_out - 1` to input `n_in - 1`.
fn sample_positions(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            if n_out == 1 || n_in == 1 {
                return (0, 0, 0.0);
            }
            let src = (o * (n_in - 1)) as f64 / (n_out - 1) as f64;
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of a row-major `h_in x w_in` array, corner aligned.
pub fn resize_bilinear(src: &[f64], h_in: usize, w_in: usize, h_out: usize, w_out: usize) -> Vec<f64> {
    assert_eq!(src.len(), h_in * w_in, "source size");
    let rows = sample_positions(h_in, h_out);
    let cols = sample_positions(w_in, w_out);
    let mut out = Vec::with_capacity(h_out * w_out);
    for &(r0, r1, ty) in &rows {
        let top = &src[r0 * w_in..(r0 + 1) * w_in];
        let bot = &src[r1 * w_in..(r1 + 1) * w_in];
        for &(c0, c1, tx) in &cols {
            let upper = lerp(top[c0], top[c1], tx);
            let lower = lerp(bot[c0], bot[c1], tx);
            out.push(lerp(upper, lower, ty));
        }
    }
    out
}

/// The four quadrant crops of an image, each resized to `S x S`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub side: usize,
    /// Top-left, top-right, bottom-left, bottom-right.
    pub patches: [Vec<f64>; PATCHES],
    /// `(row, col)` of each quadrant's top-left pixel in the source image.
    pub origins: [(usize, usize); PATCHES],
}

pub fn crop_patches(image: &[f64], side: usize) -> Result<PatchGrid> {
    if side == 0 || side % 2 != 0 {
        return shape_err(format!("patching needs an even image side, got {side}"));
    }
    if image.len() != side * side {
        return shape_err(format!("image has {} pixels, expected {}", image.len(), side * side));
    }
    let half = side / 2;
    let origins = [(0, 0), (0, half), (half, 0), (half, half)];
    let patches = origins.map(|(r0, c0)| {
        let crop: Vec<f64> = (r0..r0 + half)
            .flat_map(|r| image[r * side + c0..r * side + c0 + half].iter().copied())
            .collect();
        resize_bilinear(&crop, half, half, side, side)
    });
    Ok(PatchGrid {
        side,
        patches,
        origins,
    })
}

/// Stacks the patches of every image row into a `(4 * n, S*S)` matrix;
/// row `4 * i + j` is patch `j` of image `i`.
pub fn patch_matrix(images: ArrayView2<'_, f64>, side: usize) -> Result<Array2<f64>> {
    let d = side * side;
    if images.ncols() != d {
        return shape_err("image width does not match side");
    }
    let mut out = Array2::zeros((images.nrows() * PATCHES, d));
    for (i, img) in images.rows().into_iter().enumerate() {
        let owned;
        let pixels = match img.as_slice() {
            Some(s) => s,
            None => {
                owned = img.to_vec();
                &owned
            }
        };
        let grid = crop_patches(pixels, side)?;
        for (j, patch) in grid.patches.iter().enumerate() {
            out.row_mut(PATCHES * i + j)
                .as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(patch);
        }
    }
    Ok(out)
}

/// Per-class softmax over the patch axis of an `(m, q)` logit matrix.
pub fn patch_weights(logits: ArrayView2<'_, f64>, tau: f64) -> Result<Array2<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let mut w = Array2::zeros(logits.raw_dim());
    for (col, mut out) in logits.axis_iter(Axis(1)).zip(w.axis_iter_mut(Axis(1))) {
        let max = col.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut total = 0.0;
        for (o, &v) in out.iter_mut().zip(col) {
            *o = ((v - max) / tau).exp();
            total += *o;
        }
        out.mapv_inplace(|v| v / total);
    }
    Ok(w)
}

/// `q_k = sum_j w_jk q_jk`.
pub fn aggregate_patch_logits(logits: ArrayView2<'_, f64>, weights: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    if logits.dim() != weights.dim() {
        return shape_err("patch logits and weights differ in shape");
    }
    Ok((&logits * &weights).sum_axis(Axis(0)))
}

/// `sigmoid(p_k + lambda * q_k)`.
pub fn tde_fuse(image_logits: ArrayView1<'_, f64>, aggregated: ArrayView1<'_, f64>, lambda: f64) -> Result<Array1<f64>> {
    if image_logits.len() != aggregated.len() {
        return shape_err("image and patch logits differ in length");
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be nonnegative, got {lambda}")));
    }
    Ok(image_logits
        .iter()
        .zip(aggregated)
        .map(|(&p, &q)| sigmoid(p + lambda * q))
        .collect())
}

/// Which head supplies the patch logits and which supplies the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSource {
    /// One head for everything: image logits, patch logits and weights.
    Shared,
    /// Patch head for patch logits and weights.
    PsiHead,
    /// Patch head for patch logits, weight head for the weights.
    ThetaHead,
}

impl WeightSource {
    pub fn name(self) -> &'static str {
        match self {
            WeightSource::Shared => "shared",
            WeightSource::PsiHead => "psi",
            WeightSource::ThetaHead => "theta",
        }
    }

    fn roles(self) -> (HeadRole, HeadRole) {
        match self {
            WeightSource::Shared => (HeadRole::Image, HeadRole::Image),
            WeightSource::PsiHead => (HeadRole::Patch, HeadRole::Patch),
            WeightSource::ThetaHead => (HeadRole::Patch, HeadRole::Weight),
        }
    }
}

impl FromStr for WeightSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(WeightSource::Shared),
            "psi" | "psi_head" => Ok(WeightSource::PsiHead),
            "theta" | "theta_head" => Ok(WeightSource::ThetaHead),
            other => Err(Error::Config(format!("unknown weight source '{other}'"))),
        }
    }
}

impl fmt::Display for WeightSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub tau: f64,
    pub lambda: f64,
    pub weight_source: WeightSource,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            lambda: 1.0,
            weight_source: WeightSource::Shared,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("fusion.tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "fusion.lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Every intermediate of one fused prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBundle {
    pub image_logits: Array1<f64>,
    /// `(4, q)`
    pub patch_logits: Array2<f64>,
    /// `(4, q)` logits the weights were computed from.
    pub weight_logits: Array2<f64>,
    /// `(4, q)`, each column sums to one.
    pub weights: Array2<f64>,
    pub aggregated: Array1<f64>,
    pub fused: Array1<f64>,
}

fn fuse_batch(model: &ModelParams, images: ArrayView2<'_, f64>, cfg: &FusionConfig) -> Result<Vec<LogitBundle>> {
    cfg.validate()?;
    let side = model.dims.side;
    let patches = patch_matrix(images, side)?;
    let image_logits = model.logits(images, HeadRole::Image)?;
    let (patch_role, weight_role) = cfg.weight_source.roles();
    let roles: Vec<HeadRole> = if patch_role == weight_role {
        vec![patch_role]
    } else {
        vec![patch_role, weight_role]
    };
    let pass = model.forward(patches.view(), &roles)?;
    let patch_all = &pass.logits[0];
    let weight_all = pass.logits.last().expect("at least one role");
    let mut out = Vec::with_capacity(images.nrows());
    for i in 0..images.nrows() {
        let rows = ndarray::s![PATCHES * i..PATCHES * (i + 1), ..];
        let patch_logits = patch_all.slice(rows).to_owned();
        let weight_logits = weight_all.slice(rows).to_owned();
        let weights = patch_weights(weight_logits.view(), cfg.tau)?;
        let aggregated = aggregate_patch_logits(patch_logits.view(), weights.view())?;
        let p = image_logits.row(i).to_owned();
        let fused = tde_fuse(p.view(), aggregated.view(), cfg.lambda)?;
        out.push(LogitBundle {
            image_logits: p,
            patch_logits,
            weight_logits,
            weights,
            aggregated,
            fused,
        });
    }
    Ok(out)
}

/// Patching-based inference for one image.
pub fn pat_i_infer(model: &ModelParams, image: &[f64], cfg: &FusionConfig) -> Result<LogitBundle> {
    let x = ArrayView2::from_shape((1, image.len()), image)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(fuse_batch(model, x, cfg)?.pop().expect("one image"))
}

/// Outputs for a whole evaluation set, in image order.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    /// `(n, q)` image logits `p`.
    pub image_logits: Array2<f64>,
    /// Aggregated patch logits and fused probabilities, present for fused
    /// inference only.
    pub fusion: Option<FusedColumns>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedColumns {
    pub aggregated: Array2<f64>,
    pub tde: Array2<f64>,
}

impl PredictionTable {
    pub fn len(&self) -> usize {
        self.image_logits.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.image_logits.ncols()
    }

    /// Probabilities used for evaluation: the fused scores when present,
    /// otherwise `sigmoid(p)`.
    pub fn scores(&self) -> Array2<f64> {
        match &self.fusion {
            Some(f) => f.tde.clone(),
            None => self.image_logits.mapv(sigmoid),
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let q = self.classes();
        let mut header = vec!["image_index".to_string()];
        header.extend((1..=q).map(|k| format!("p_{k}")));
        if self.fusion.is_some() {
            header.extend((1..=q).map(|k| format!("q_agg_{k}")));
            header.extend((1..=q).map(|k| format!("tde_{k}")));
        }
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut row = vec![i.to_string()];
            row.extend(self.image_logits.row(i).iter().map(f64::to_string));
            if let Some(f) = &self.fusion {
                row.extend(f.aggregated.row(i).iter().map(f64::to_string));
                row.extend(f.tde.row(i).iter().map(f64::to_string));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty prediction file".into()))??;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"image_index") {
            return Err(Error::Format("prediction header must start with image_index".into()));
        }
        let q = cols.iter().filter(|c| c.starts_with("p_")).count();
        let fused = match cols.len() {
            n if n == 1 + q => false,
            n if n == 1 + 3 * q => true,
            _ => return Err(Error::Format("prediction header has an unexpected column set".into())),
        };
        for k in 1..=q {
            let ok = cols[k] == format!("p_{k}")
                && (!fused || (cols[q + k] == format!("q_agg_{k}") && cols[2 * q + k] == format!("tde_{k}")));
            if !ok {
                return Err(Error::Format(format!("missing or misplaced column for class {k}")));
            }
        }
        let mut values: Vec<f64> = Vec::new();
        let mut n = 0;
        for (line_no, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(Error::Format(format!("row {} has {} fields", line_no + 2, fields.len())));
            }
            if fields[0].parse::<usize>().ok() != Some(n) {
                return Err(Error::Format(format!("row {} has image_index out of order", line_no + 2)));
            }
            for f in &fields[1..] {
                values.push(
                    f.parse()
                        .map_err(|_| Error::Format(format!("bad number '{f}' on row {}", line_no + 2)))?,
                );
            }
            n += 1;
        }
        let width = cols.len() - 1;
        let all = Array2::from_shape_vec((n, width), values).map_err(|e| Error::Format(e.to_string()))?;
        let image_logits = all.slice(ndarray::s![.., 0..q]).to_owned();
        let fusion = fused.then(|| FusedColumns {
            aggregated: all.slice(ndarray::s![.., q..2 * q]).to_owned(),
            tde: all.slice(ndarray::s![.., 2 * q..3 * q]).to_owned(),
        });
        Ok(Self { image_logits, fusion })
    }
}

const INFER_CHUNK: usize = 128;

/// Image logits only.
pub fn predict_plain(model: &ModelParams, images: ArrayView2<'_, f64>) -> Result<PredictionTable> {
    let mut image_logits = Array2::zeros((images.nrows(), model.dims.classes));
    let mut start = 0;
    while start < images.nrows() {
        let end = (start + INFER_CHUNK).min(images.nrows());
        let z = model.logits(images.slice(ndarray::s![start..end, ..]), HeadRole::Image)?;
        image_logits.slice_mut(ndarray::s![start..end, ..]).assign(&z);
        start = end;
    }
    Ok(PredictionTable {
        image_logits,
        fusion: None,
    })
}

/// Fused inference for every row of `images`.
pub fn predict_fused(model: &ModelParams, images: ArrayView2<'_, f64>, cfg: &FusionConfig) -> Result<PredictionTable> {
    let (n, q) = (images.nrows(), model.dims.classes);
    let mut image_logits = Array2::zeros((n, q));
    let mut aggregated = Array2::zeros((n, q));
    let mut tde = Array2::zeros((n, q));
    let mut start = 0;
    while start < n {
        let end = (start + INFER_CHUNK).min(n);
        let bundles = fuse_batch(model, images.slice(ndarray::s![start..end, ..]), cfg)?;
        for (i, b) in bundles.into_iter().enumerate() {
            image_logits.row_mut(start + i).assign(&b.image_logits);
            aggregated.row_mut(start + i).assign(&b.aggregated);
            tde.row_mut(start + i).assign(&b.fused);
        }
        start = end;
    }
    Ok(PredictionTable {
        image_logits,
        fusion: Some(FusedColumns { aggregated, tde }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{Arch, Dims};
    use crate::rng::substream;
    use ndarray::array;
    use rand::Rng;

    /// Direct per-pixel bilinear formula.
    fn reference_resize(src: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
        let scale = (n_in - 1) as f64 / (n_out - 1) as f64;
        let mut out = vec![0.0; n_out * n_out];
        for r in 0..n_out {
            for c in 0..n_out {
                let (y, x) = (r as f64 * scale, c as f64 * scale);
                let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(n_in - 1), (x0 + 1).min(n_in - 1));
                let (dy, dx) = (y - y0 as f64, x - x0 as f64);
                let at = |yy: usize, xx: usize| src[yy * n_in + xx];
                out[r * n_out + c] = (1.0 - dy) * (1.0 - dx) * at(y0, x0)
                    + (1.0 - dy) * dx * at(y0, x1)
                    + dy * (1.0 - dx) * at(y1, x0)
                    + dy * dx * at(y1, x1);
            }
        }
        out
    }

    #[test]
    fn constant_image_gives_constant_patches() {
        let grid = crop_patches(&vec![0.37; 64], 8).unwrap();
        for p in &grid.patches {
            assert!(p.iter().all(|&v| v == 0.37));
        }
        assert!(crop_patches(&[0.0; 49], 7).is_err());
        assert!(crop_patches(&[0.0; 10], 8).is_err());
    }

    #[test]
    fn glyph_in_top_left_only_lights_patch_one() {
        let mut img = vec![0.0; 16 * 16];
        for r in 2..6 {
            for c in 1..5 {
                img[r * 16 + c] = 0.8;
            }
        }
        let grid = crop_patches(&img, 16).unwrap();
        assert!(grid.patches[0].iter().any(|&v| v > 0.0));
        for p in &grid.patches[1..] {
            assert!(p.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn patches_match_reference_resampler_and_keep_corners() {
        let mut rng = substream(21, "img");
        let side = 12;
        let half = side / 2;
        for _ in 0..20 {
            let img: Vec<f64> = (0..side * side).map(|_| rng.random()).collect();
            let grid = crop_patches(&img, side).unwrap();
            for (p, &(r0, c0)) in grid.patches.iter().zip(&grid.origins) {
                let crop: Vec<f64> = (0..half)
                    .flat_map(|r| (0..half).map(move |c| (r, c)))
                    .map(|(r, c)| img[(r0 + r) * side + c0 + c])
                    .collect();
                let reference = reference_resize(&crop, half, side);
                for (a, b) in p.iter().zip(&reference) {
                    assert!((a - b).abs() < 1e-12);
                }
                let corner = |r: usize, c: usize| img[(r0 + r) * side + c0 + c];
                assert_eq!(p[0], corner(0, 0));
                assert_eq!(p[side - 1], corner(0, half - 1));
                assert_eq!(p[(side - 1) * side], corner(half - 1, 0));
                assert_eq!(p[side * side - 1], corner(half - 1, half - 1));
            }
        }
    }

    #[test]
    fn weight_reference_values() {
        let w = patch_weights(array![[2.0], [0.0]].view(), 1.0).unwrap();
        assert!((w[[0, 0]] - 0.880797).abs() < 1e-6);
        assert!((w[[1, 0]] - 0.119203).abs() < 1e-6);

        let w = patch_weights(Array2::from_elem((4, 3), 1.7).view(), 0.5).unwrap();
        assert!(w.iter().all(|&v| v == 0.25));

        let w = patch_weights(array![[0.1, 3.0], [0.9, 2.0], [0.2, 1.0], [0.3, 0.0]].view(), 0.01).unwrap();
        assert!(w[[1, 0]] > 1.0 - 1e-6);
        assert!(w[[0, 1]] > 1.0 - 1e-6);
        assert!(patch_weights(w.view(), 0.0).is_err());
    }

    #[test]
    fn aggregation_cases() {
        let logits = array![[1.0, -2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]];
        let one_hot = array![[0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 1.0]];
        let q = aggregate_patch_logits(logits.view(), one_hot.view()).unwrap();
        assert_eq!(q, array![3.0, 8.0]);

        let same = array![[0.5, -1.5], [0.5, -1.5], [0.5, -1.5], [0.5, -1.5]];
        let w = array![[0.1, 0.7], [0.2, 0.1], [0.3, 0.1], [0.4, 0.1]];
        let q = aggregate_patch_logits(same.view(), w.view()).unwrap();
        assert!((q[0] - 0.5).abs() < 1e-15 && (q[1] + 1.5).abs() < 1e-15);

        let mut rng = substream(22, "agg");
        for _ in 0..50 {
            let l = Array2::from_shape_simple_fn((4, 6), || rng.random_range(-3.0..3.0));
            let w = patch_weights(l.view(), 0.7).unwrap();
            let q = aggregate_patch_logits(l.view(), w.view()).unwrap();
            for k in 0..6 {
                let mut acc = 0.0;
                for j in 0..4 {
                    acc += w[[j, k]] * l[[j, k]];
                }
                assert!((q[k] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fusion_values() {
        let p = array![0.3, -1.2];
        let q = array![5.0, -7.0];
        let plain = tde_fuse(p.view(), q.view(), 0.0).unwrap();
        assert_eq!(plain, p.mapv(sigmoid));
        let half = tde_fuse(array![0.0].view(), array![0.0].view(), 1.0).unwrap();
        assert_eq!(half[0], 0.5);
        let v = tde_fuse(array![1.0].view(), array![0.5].view(), 1.0).unwrap();
        assert!((v[0] - 0.817574).abs() < 1e-6);
        assert!(tde_fuse(p.view(), q.view(), -1.0).is_err());
    }

    #[test]
    fn zero_model_fuses_to_one_half() {
        let dims = Dims { side: 8, hidden: 5, classes: 3 };
        let model = ModelParams::zeros(Arch::Det, dims);
        let b = pat_i_infer(&model, &[0.4; 64], &FusionConfig::default()).unwrap();
        assert!(b.fused.iter().all(|&v| v == 0.5));
        for k in 0..3 {
            assert!((b.weights.column(k).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn theta_source_needs_pat_t_model() {
        let dims = Dims { side: 4, hidden: 3, classes: 2 };
        let cfg = FusionConfig {
            weight_source: WeightSource::ThetaHead,
            ..FusionConfig::default()
        };
        let det = ModelParams::zeros(Arch::Det, dims);
        assert!(pat_i_infer(&det, &[0.0; 16], &cfg).is_err());
        let mut rng = substream(23, "m");
        let pat = ModelParams::init(Arch::PatT, dims, &mut rng);
        let b = pat_i_infer(&pat, &[0.5; 16], &cfg).unwrap();
        assert_eq!(b.weights.dim(), (4, 2));
    }

    #[test]
    fn batched_and_single_inference_agree() {
        let dims = Dims { side: 8, hidden: 7, classes: 3 };
        let mut rng = substream(24, "m");
        let model = ModelParams::init(Arch::Det, dims, &mut rng);
        let images = Array2::from_shape_simple_fn((5, 64), || rng.random::<f64>());
        let cfg = FusionConfig::default();
        let table = predict_fused(&model, images.view(), &cfg).unwrap();
        for i in 0..5 {
            let b = pat_i_infer(&model, images.row(i).as_slice().unwrap(), &cfg).unwrap();
            for k in 0..3 {
                assert!((b.fused[k] - table.fusion.as_ref().unwrap().tde[[i, k]]).abs() < 1e-12);
            }
        }
        let zero_lambda = FusionConfig { lambda: 0.0, ..cfg };
        let fused = predict_fused(&model, images.view(), &zero_lambda).unwrap();
        let plain = predict_plain(&model, images.view()).unwrap();
        assert_eq!(fused.fusion.unwrap().tde, plain.scores());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let table = PredictionTable {
            image_logits: array![[0.1, -2.5], [1e-7, 3.0]],
            fusion: Some(FusedColumns {
                aggregated: array![[0.3, 0.0], [-0.0, 1.0 / 3.0]],
                tde: array![[0.6, 0.01], [0.5, 0.9999999]],
            }),
        };
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("image_index,p_1,p_2,q_agg_1,q_agg_2,tde_1,tde_2\n"));
        assert_eq!(PredictionTable::read_csv(&buf[..]).unwrap(), table);

        let plain = PredictionTable {
            image_logits: table.image_logits.clone(),
            fusion: None,
        };
        let mut buf = Vec::new();
        plain.write_csv(&mut buf).unwrap();
        assert_eq!(PredictionTable::read_csv(&buf[..]).unwrap(), plain);

        assert!(PredictionTable::read_csv("image_index,p_1,tde_1\n".as_bytes()).is_err());
        assert!(PredictionTable::read_csv("image_index,p_1\n0,abc\n".as_bytes()).is_err());
        assert!(PredictionTable::read_csv("image_index,p_1\n1,0.5\n".as_bytes()).is_err());
    }

    proptest::proptest! {
        #[test]
        fn weights_sum_to_one_and_ignore_class_shifts(
            vals in proptest::collection::vec(-30.0f64..30.0, 12),
            shifts in proptest::collection::vec(-100.0f64..100.0, 3),
            tau in 0.01f64..50.0,
        ) {
            let logits = Array2::from_shape_vec((PATCHES, 3), vals).unwrap();
            let shifted = Array2::from_shape_fn((PATCHES, 3), |(j, k)| logits[[j, k]] + shifts[k]);
            let w = patch_weights(logits.view(), tau).unwrap();
            let ws = patch_weights(shifted.view(), tau).unwrap();
            for k in 0..3 {
                proptest::prop_assert!((w.column(k).sum() - 1.0).abs() <= 1e-12);
            }
            for (a, b) in w.iter().zip(&ws) {
                proptest::prop_assert!(*a >= 0.0 && (a - b).abs() <= 1e-12);
            }
        }
    }
}
