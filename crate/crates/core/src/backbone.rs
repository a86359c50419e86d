//! Visual side of the pipeline: linear patch embedding into a C-channel
//! feature grid, a small transformer vision encoder at width D, global
//! average pooling, and RoI pooling of region features.

use crate::attn::{encoder_layer, linear, BoundAttn, BoundFfn, BoundLayerNorm, EncoderLayerParams,
                  MaskMode, ParamVisitor, ParamVisitorMut};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::scalar::Scalar;
use crate::scene_graph::BBox;
use crate::tape::{Tape, Var};
use rand::Rng;

/// A raw image, pixel-major (y, x, channel), values expected in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image<S> {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Image<S> {
    pub fn zeros(h: usize, w: usize, channels: usize) -> Self {
        Image {
            h,
            w,
            channels,
            data: vec![S::zero(); h * w * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> S {
        self.data[(y * self.w + x) * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut S {
        &mut self.data[(y * self.w + x) * self.channels + c]
    }
}

/// Patch-level feature grid; `feats` is row-major (h·w)-by-C, so row
/// `i * w + j` is the C-vector of grid cell (i, j).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatures<S> {
    pub h: usize,
    pub w: usize,
    pub feats: Mat<S>,
}

impl<S: Scalar> PatchFeatures<S> {
    pub fn num_cells(&self) -> usize {
        self.h * self.w
    }

    pub fn channels(&self) -> usize {
        self.feats.cols()
    }

    pub fn cell(&self, i: usize, j: usize) -> &[S] {
        self.feats.row(i * self.w + j)
    }
}

#[derive(Debug, Clone)]
pub struct BackboneParams<S> {
    pub patch: usize,
    pub channels_in: usize,
    pub heads: usize,
    pub use_pos: bool,
    /// (patch²·channels_in)-by-C patch embedder.
    pub patch_w: Mat<S>,
    pub patch_b: Mat<S>,
    /// C-by-D one-layer mapping network into the encoder width.
    pub map_w: Mat<S>,
    pub map_b: Mat<S>,
    /// Learned 1-D positional embeddings, max-tokens-by-D.
    pub pos: Mat<S>,
    pub layers: Vec<EncoderLayerParams<S>>,
}

impl<S: Scalar> BackboneParams<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        patch: usize,
        channels_in: usize,
        c: usize,
        d: usize,
        ffn_hidden: usize,
        n_layers: usize,
        heads: usize,
        max_tokens: usize,
        use_pos: bool,
        rng: &mut impl Rng,
    ) -> Self {
        BackboneParams {
            patch,
            channels_in,
            heads,
            use_pos,
            patch_w: Mat::glorot(patch * patch * channels_in, c, rng),
            patch_b: Mat::zeros(1, c),
            map_w: Mat::glorot(c, d, rng),
            map_b: Mat::zeros(1, d),
            pos: Mat::uniform(max_tokens, d, 0.02, rng),
            layers: (0..n_layers)
                .map(|_| EncoderLayerParams::init(d, ffn_hidden, rng))
                .collect(),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<S>) {
        f(&format!("{prefix}.patch_w"), &self.patch_w);
        f(&format!("{prefix}.patch_b"), &self.patch_b);
        f(&format!("{prefix}.map_w"), &self.map_w);
        f(&format!("{prefix}.map_b"), &self.map_b);
        f(&format!("{prefix}.pos"), &self.pos);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.layer{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<S>) {
        f(&format!("{prefix}.patch_w"), &mut self.patch_w);
        f(&format!("{prefix}.patch_b"), &mut self.patch_b);
        f(&format!("{prefix}.map_w"), &mut self.map_w);
        f(&format!("{prefix}.map_b"), &mut self.map_b);
        f(&format!("{prefix}.pos"), &mut self.pos);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.layer{i}"), f);
        }
    }
}

/// Pixels rearranged for the patch embedder: one row per patch cell,
/// row-major over cells, each row the patch's pixels in (y, x, channel) order.
pub fn patchify<S: Scalar>(image: &Image<S>, patch: usize) -> Result<Mat<S>> {
    if patch == 0 || image.h % patch != 0 || image.w % patch != 0 {
        return Err(Error::ShapeMismatch {
            context: "patchify",
            expected: format!("dimensions divisible by patch {patch}"),
            got: format!("{}x{}", image.h, image.w),
        });
    }
    let (gh, gw) = (image.h / patch, image.w / patch);
    let row_len = patch * patch * image.channels;
    let mut out = Mat::zeros(gh * gw, row_len);
    for gi in 0..gh {
        for gj in 0..gw {
            let row = out.row_mut(gi * gw + gj);
            let mut k = 0;
            for py in 0..patch {
                for px in 0..patch {
                    for c in 0..image.channels {
                        row[k] = image.at(gi * patch + py, gj * patch + px, c);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Linear patch embedding of an image into the C-channel feature grid.
pub fn extract_patch_features<S: Scalar>(
    image: &Image<S>,
    params: &BackboneParams<S>,
) -> Result<PatchFeatures<S>> {
    if image.channels != params.channels_in {
        return Err(Error::ShapeMismatch {
            context: "extract_patch_features",
            expected: format!("{} channels", params.channels_in),
            got: format!("{} channels", image.channels),
        });
    }
    let x = patchify(image, params.patch)?;
    let mut feats = crate::mat::matmul(&x, &params.patch_w);
    for i in 0..feats.rows() {
        for (o, &b) in feats.row_mut(i).iter_mut().zip(params.patch_b.row(0)) {
            *o += b;
        }
    }
    Ok(PatchFeatures {
        h: image.h / params.patch,
        w: image.w / params.patch,
        feats,
    })
}

/// Mean over all grid cells: the global visual feature v_g (1-by-C).
pub fn global_pool<S: Scalar>(v: &PatchFeatures<S>) -> Mat<S> {
    let n = v.num_cells();
    let c = v.channels();
    let mut out = Mat::zeros(1, c);
    for i in 0..n {
        for (o, &x) in out.row_mut(0).iter_mut().zip(v.feats.row(i)) {
            *o += x;
        }
    }
    let inv = S::of(1.0 / n as f64);
    for x in out.row_mut(0) {
        *x = *x * inv;
    }
    out
}

/// Indices of grid cells whose centers fall inside `bbox` (normalized
/// coordinates); falls back to the single cell nearest the box center when
/// no center is covered.
pub fn roi_cells(h: usize, w: usize, bbox: &BBox) -> Result<Vec<usize>> {
    if bbox.area() <= 0.0 {
        return Err(Error::DegenerateBox {
            x0: bbox.x0,
            y0: bbox.y0,
            x1: bbox.x1,
            y1: bbox.y1,
        });
    }
    let mut cells = Vec::new();
    for i in 0..h {
        let cy = (i as f64 + 0.5) / h as f64;
        for j in 0..w {
            let cx = (j as f64 + 0.5) / w as f64;
            if cx >= bbox.x0 && cx <= bbox.x1 && cy >= bbox.y0 && cy <= bbox.y1 {
                cells.push(i * w + j);
            }
        }
    }
    if cells.is_empty() {
        let (bx, by) = bbox.center();
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..h {
            let cy = (i as f64 + 0.5) / h as f64;
            for j in 0..w {
                let cx = (j as f64 + 0.5) / w as f64;
                let d = (cx - bx) * (cx - bx) + (cy - by) * (cy - by);
                if d < best_d {
                    best_d = d;
                    best = i * w + j;
                }
            }
        }
        cells.push(best);
    }
    Ok(cells)
}

/// Mean-pool the feature vectors of every box's covered cells: one C-vector
/// per box.
pub fn roi_pool<S: Scalar>(v: &PatchFeatures<S>, boxes: &[BBox]) -> Result<Mat<S>> {
    let c = v.channels();
    let mut out = Mat::zeros(boxes.len(), c);
    for (bi, b) in boxes.iter().enumerate() {
        let cells = roi_cells(v.h, v.w, b)?;
        for &cell in &cells {
            let src = v.feats.row(cell).to_vec();
            for (o, &x) in out.row_mut(bi).iter_mut().zip(&src) {
                *o += x;
            }
        }
        let inv = S::of(1.0 / cells.len() as f64);
        for x in out.row_mut(bi) {
            *x = *x * inv;
        }
    }
    Ok(out)
}

/// Tape-bound backbone parameters.
pub struct BoundBackbone {
    pub patch_w: Var,
    pub patch_b: Var,
    pub map_w: Var,
    pub map_b: Var,
    pub pos: Var,
    pub layers: Vec<(BoundAttn, BoundLayerNorm, BoundFfn, BoundLayerNorm)>,
}

pub fn bind_backbone<S: Scalar>(
    t: &mut Tape<S>,
    p: &BackboneParams<S>,
    prefix: &str,
) -> BoundBackbone {
    BoundBackbone {
        patch_w: t.param(&format!("{prefix}.patch_w"), &p.patch_w),
        patch_b: t.param(&format!("{prefix}.patch_b"), &p.patch_b),
        map_w: t.param(&format!("{prefix}.map_w"), &p.map_w),
        map_b: t.param(&format!("{prefix}.map_b"), &p.map_b),
        pos: t.param(&format!("{prefix}.pos"), &p.pos),
        layers: p
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                (
                    l.attn.bind(t, &format!("{prefix}.layer{i}.attn")),
                    l.ln1.bind(t, &format!("{prefix}.layer{i}.ln1")),
                    l.ffn.bind(t, &format!("{prefix}.layer{i}.ffn")),
                    l.ln2.bind(t, &format!("{prefix}.layer{i}.ln2")),
                )
            })
            .collect(),
    }
}

/// Patch features on the tape: gradient reaches the embedder weights.
/// `pixels` is the constant patchified image.
pub fn patch_features_tape<S: Scalar>(t: &mut Tape<S>, b: &BoundBackbone, pixels: Var) -> Var {
    linear(t, pixels, b.patch_w, b.patch_b)
}

/// Vision-encoder forward on the tape: mapping network, optional positional
/// embeddings, then the self-attention stack. `feats` is N_s-by-C.
pub fn visual_tokens_tape<S: Scalar>(
    t: &mut Tape<S>,
    p: &BackboneParams<S>,
    b: &BoundBackbone,
    feats: Var,
) -> Var {
    let n = t.value(feats).rows();
    let mut x = linear(t, feats, b.map_w, b.map_b);
    if p.use_pos {
        assert!(
            n <= t.value(b.pos).rows(),
            "{n} tokens exceed the positional table"
        );
        let pos_rows = t.gather_rows(b.pos, (0..n).collect());
        x = t.add(x, pos_rows);
    }
    for (attn, ln1, ffn, ln2) in &b.layers {
        x = encoder_layer(t, x, attn, ln1, ffn, ln2, p.heads, None, MaskMode::Exclusive);
    }
    x
}

/// Encode patch features into N_s visual tokens of width D (the contract
/// entry point; runs the same tape forward training uses).
pub fn encode_visual<S: Scalar>(v: &PatchFeatures<S>, params: &BackboneParams<S>) -> Mat<S> {
    let mut t = Tape::new();
    let b = bind_backbone(&mut t, params, "backbone");
    let feats = t.constant(v.feats.clone());
    let out = visual_tokens_tape(&mut t, params, &b, feats);
    t.value(out).clone()
}
